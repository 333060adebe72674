/// Closed-form effective training time ratio under Poisson failures:
/// `1 / (1 + t_ckpt / (t_iter * interval)) * 1 / (1 + expected_r / mtbf)`.
pub fn analytic_ettr(t_ckpt: f64, interval: u64, t_iter: f64, expected_r: f64, mtbf: f64) -> f64 {
    let ckpt = 1.0 / (1.0 + t_ckpt / (t_iter * interval as f64));
    let fail = 1.0 / (1.0 + expected_r / mtbf);
    ckpt * fail
}
