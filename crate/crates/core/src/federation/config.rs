use crate::error::{Error, Result};
use crate::nn::OptimizerKind;
use crate::zo::ZoConfig;

/// How the server obtains its per-client encoder gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Exact `∂L/∂w_E` by backpropagation through the encoder.
    Pit,
    /// Two-point SPSA estimate from perturbed encoder forwards.
    Ptzo,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Pit => "pit",
            Method::Ptzo => "ptzo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pit" => Some(Method::Pit),
            "ptzo" => Some(Method::Ptzo),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundConfig {
    /// Communication rounds `T`.
    pub rounds: usize,
    /// Client count `M`.
    pub clients: usize,
    /// Sampling ratio `q`; `round(q·M)` clients take part each round.
    pub sample_ratio: f64,
    /// Local steps `K`, one minibatch each.
    pub local_steps: usize,
    /// Head/tail learning rate. Zero freezes the client weights.
    pub client_lr: f64,
    pub client_optimizer: OptimizerKind,
    /// Encoder learning rate. Zero freezes the encoder.
    pub server_lr: f64,
    /// Multiplier applied to the server rate every `server_lr_decay_every`
    /// rounds; 0 disables decay.
    pub server_lr_decay: f64,
    pub server_lr_decay_every: usize,
    /// Head/tail aggregation happens after round `t` when `t % fedround == 0`.
    pub fedround: usize,
    pub method: Method,
    pub zo: ZoConfig,
    /// Requested minibatch size; clipped to each client's shard size.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            rounds: 500,
            clients: 100,
            sample_ratio: 0.1,
            local_steps: 5,
            client_lr: 2e-4,
            client_optimizer: OptimizerKind::adam(),
            server_lr: 1e-6,
            server_lr_decay: 0.5,
            server_lr_decay_every: 0,
            fedround: 20,
            method: Method::Pit,
            zo: ZoConfig::default(),
            batch_size: 128,
            seed: 0,
        }
    }
}

impl RoundConfig {
    /// `m = round(q·M)`.
    pub fn sampled_per_round(&self) -> usize {
        (self.sample_ratio * self.clients as f64).round() as usize
    }

    pub fn server_lr_at(&self, round: usize) -> f64 {
        if self.server_lr_decay_every == 0 {
            self.server_lr
        } else {
            self.server_lr * self.server_lr_decay.powi((round / self.server_lr_decay_every) as i32)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.clients == 0 {
            return fail("client count M must be >= 1".into());
        }
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return fail(format!("sampling ratio q must be in (0, 1], got {}", self.sample_ratio));
        }
        if self.sampled_per_round() < 1 {
            return fail(format!(
                "q·M = {} rounds to zero sampled clients",
                self.sample_ratio * self.clients as f64
            ));
        }
        if self.local_steps == 0 {
            return fail("local steps K must be >= 1".into());
        }
        if self.fedround == 0 {
            return fail("fedround must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be >= 1".into());
        }
        if !(self.client_lr >= 0.0 && self.client_lr.is_finite()) {
            return fail(format!("client learning rate must be >= 0, got {}", self.client_lr));
        }
        if !(self.server_lr >= 0.0 && self.server_lr.is_finite()) {
            return fail(format!("server learning rate must be >= 0, got {}", self.server_lr));
        }
        if !(self.server_lr_decay > 0.0 && self.server_lr_decay <= 1.0) {
            return fail(format!("server lr decay must be in (0, 1], got {}", self.server_lr_decay));
        }
        if self.client_lr > 0.0 {
            crate::nn::Optimizer::new(self.client_optimizer, self.client_lr)?;
        }
        self.zo.validate()
    }
}
