use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::split::Encoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoredGradient {
    pub round: usize,
    pub client: usize,
    pub step: usize,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub encoder: Encoder,
    /// `g_s^t(i)` for the current round, keyed by client id.
    pub stored: BTreeMap<usize, Vec<f64>>,
    pub round: usize,
    /// Every gradient store, with the local step it came from.
    pub storage_log: Vec<StoredGradient>,
}

impl ServerState {
    pub fn new(encoder: Encoder) -> Self {
        Self {
            encoder,
            stored: BTreeMap::new(),
            round: 0,
            storage_log: Vec::new(),
        }
    }

    pub fn store_gradient(&mut self, round: usize, client: usize, step: usize, gradient: Vec<f64>) -> Result<()> {
        if self.stored.insert(client, gradient).is_some() {
            return Err(Error::Protocol(format!(
                "client {client} stored two server gradients in round {round}"
            )));
        }
        self.storage_log.push(StoredGradient { round, client, step });
        Ok(())
    }
}

/// `w_E ← w_E − (η/m)·Σ g_s(i)` over the sampled clients, summed in
/// ascending client order. Clears the stored gradients.
pub fn server_update(server: &mut ServerState, sampled: &[usize], lr: f64) -> Result<()> {
    let mut ids = sampled.to_vec();
    ids.sort_unstable();
    if ids.is_empty() {
        return Err(Error::Protocol("server update with no participants".into()));
    }
    let d = server.encoder.param_count();
    let mut sum = vec![0.0; d];
    for &id in &ids {
        let g = server.stored.get(&id).ok_or_else(|| {
            Error::Protocol(format!(
                "round {}: no stored encoder gradient from client {id}",
                server.round
            ))
        })?;
        if g.len() != d {
            return Err(Error::Protocol(format!(
                "client {id} sent a gradient of length {}, encoder has {d}",
                g.len()
            )));
        }
        sum.iter_mut().zip(g).for_each(|(s, x)| *s += x);
    }
    if let Some(extra) = server.stored.keys().find(|k| ids.binary_search(k).is_err()) {
        return Err(Error::Protocol(format!(
            "round {}: gradient stored by non-participant {extra}",
            server.round
        )));
    }
    let scale = lr / ids.len() as f64;
    for p in server.encoder.params_mut() {
        let n = p.len();
        let (head, rest) = sum.split_at(n);
        for (w, s) in p.value.data_mut().iter_mut().zip(head) {
            *w -= scale * s;
        }
        sum = rest.to_vec();
    }
    server.stored.clear();
    Ok(())
}
