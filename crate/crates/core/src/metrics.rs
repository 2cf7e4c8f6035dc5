/// One row of a training or evaluation log. Fields that an agent does not
/// produce stay `None` and serialize as blanks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub episode: u64,
    pub ret: Option<f64>,
    pub loss: Option<f64>,
    pub epsilon: Option<f64>,
    pub kills: Option<u32>,
    pub deaths: Option<u32>,
}

impl MetricsRow {
    /// kills / max(1, deaths); `None` when no kill counter was recorded.
    pub fn kd_ratio(&self) -> Option<f64> {
        self.kills.map(|k| kd_ratio(k, self.deaths.unwrap_or(0)))
    }
}

pub fn kd_ratio(kills: u32, deaths: u32) -> f64 {
    kills as f64 / deaths.max(1) as f64
}

/// Mean of a slice; `None` when empty.
pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Totals over a set of evaluation episodes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalSummary {
    pub returns: Vec<f64>,
    pub lengths: Vec<usize>,
    pub kills: u32,
    pub deaths: u32,
}

impl EvalSummary {
    pub fn episodes(&self) -> usize {
        self.returns.len()
    }

    pub fn mean_return(&self) -> f64 {
        mean(&self.returns).unwrap_or(0.0)
    }

    pub fn kd(&self) -> f64 {
        kd_ratio(self.kills, self.deaths)
    }

    /// Fraction of episodes whose return reached `threshold`.
    pub fn success_rate(&self, threshold: f64) -> f64 {
        if self.returns.is_empty() {
            return 0.0;
        }
        self.returns.iter().filter(|r| **r >= threshold).count() as f64 / self.returns.len() as f64
    }
}
