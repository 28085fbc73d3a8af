mod support {
    pub mod grad_cases;
}

use support::grad_cases::{self as cases, TOL};

macro_rules! fd_test {
    ($($name:ident),*) => {$(
        #[test]
        fn $name() {
            let e = cases::$name();
            assert!(e <= TOL, "worst relative error {e:e}");
        }
    )*};
}

fd_test!(
    matmul,
    bias,
    activations,
    mlp,
    td3_critic,
    td3_policy,
    sac_critic,
    sac_policy,
    tanh_gaussian_log_prob,
    dvd_logdet
);

#[test]
fn shared_critic_gradient_is_member_mean() {
    let d = cases::shared_critic_linearity();
    assert!(d <= 1e-6, "max abs difference {d:e}");
}
