use std::fmt::Write as _;

/// One row per completed round.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub round: usize,
    pub participants: usize,
    /// Mean and max over participants of each participant's mean loss
    /// across its `K` local steps.
    pub mean_train_loss: f64,
    pub max_train_loss: f64,
    pub mean_test_accuracy: f64,
    /// `(mean, max)` of the σ_g² probe when it ran this round.
    pub sigma_g2: Option<(f64, f64)>,
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub aggregated: bool,
    /// Excluded from [`metrics_csv`] so metrics files are reproducible.
    pub wall_clock_ms: f64,
}

pub const METRICS_HEADER: &str = "round,participants,mean_train_loss,max_train_loss,mean_test_accuracy,sigma_g2_mean,sigma_g2_max,bytes_up,bytes_down,aggregated";

/// Comma-separated rows under [`METRICS_HEADER`]. Floats use shortest
/// round-trip formatting; an absent probe is an empty field.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let (sm, sx) = match r.sigma_g2 {
            Some((m, x)) => (m.to_string(), x.to_string()),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.round,
            r.participants,
            r.mean_train_loss,
            r.max_train_loss,
            r.mean_test_accuracy,
            sm,
            sx,
            r.bytes_up,
            r.bytes_down,
            u8::from(r.aggregated)
        );
    }
    out
}

pub fn timing_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("round,wall_clock_ms\n");
    for r in records {
        let _ = writeln!(out, "{},{:.3}", r.round, r.wall_clock_ms);
    }
    out
}

/// First round whose mean test accuracy reaches `threshold`, counted from 1.
pub fn rounds_to_accuracy(records: &[MetricsRecord], threshold: f64) -> Option<usize> {
    records
        .iter()
        .find(|r| r.mean_test_accuracy >= threshold)
        .map(|r| r.round + 1)
}
