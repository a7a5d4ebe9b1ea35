//! Text checkpoint of named tensors.
//!
//! ```text
//! fedsplit-checkpoint v1
//! # free-form header lines start with '#'
//! tensor <name> <dim>,<dim>,...
//! <values separated by single spaces>
//! ```
//!
//! Values use Rust's shortest round-trip `f64` formatting, so reading a
//! checkpoint back reproduces every bit.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tensor};

use super::model::{ClientModel, Encoder};

pub const MAGIC: &str = "fedsplit-checkpoint v1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub header: Vec<String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn push_params<'a>(&mut self, prefix: &str, params: impl IntoIterator<Item = &'a Parameter>) {
        for (i, p) in params.into_iter().enumerate() {
            self.tensors.push((format!("{prefix}.{i}"), p.value.clone()));
        }
    }

    pub fn from_models(encoder: &Encoder, clients: &[ClientModel]) -> Self {
        let mut ck = Checkpoint::default();
        ck.push_params("encoder", encoder.params());
        for (i, c) in clients.iter().enumerate() {
            ck.push_params(&format!("client{i}.head"), c.head_params());
            ck.push_params(&format!("client{i}.tail"), c.tail_params());
        }
        ck
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Loads `prefix.0`, `prefix.1`, ... into `params`.
    pub fn restore_params<'a>(
        &self,
        prefix: &str,
        params: impl IntoIterator<Item = &'a mut Parameter>,
    ) -> Result<()> {
        for (i, p) in params.into_iter().enumerate() {
            let name = format!("{prefix}.{i}");
            let t = self
                .get(&name)
                .ok_or_else(|| Error::Input(format!("checkpoint has no tensor {name}")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Input(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for h in &self.header {
            let _ = writeln!(out, "# {h}");
        }
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "tensor {name} {}", dims.join(","));
            let vals: Vec<String> = t.data().iter().map(|v| v.to_string()).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            location: format!("checkpoint line {line}"),
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, MAGIC)) => {}
            other => {
                return Err(err(1, format!("expected '{MAGIC}', found {:?}", other.map(|o| o.1))))
            }
        }
        let mut ck = Checkpoint::default();
        while let Some((no, line)) = lines.next() {
            if let Some(h) = line.strip_prefix('#') {
                ck.header.push(h.trim_start().to_string());
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some("tensor"), Some(name), Some(dims), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(err(no, format!("expected 'tensor <name> <dims>', found {line:?}")));
            };
            let shape = dims
                .split(',')
                .map(|d| d.parse::<usize>().map_err(|e| err(no, format!("bad dim {d:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let (vno, vline) = lines
                .next()
                .ok_or_else(|| err(no, format!("tensor {name} has no value line")))?;
            let data = vline
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(|v| v.parse::<f64>().map_err(|e| err(vno, format!("bad value {v:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| err(vno, e.to_string()))?;
            ck.tensors.push((name.to_string(), t));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::split::ModelDims;

    #[test]
    fn round_trip_is_bit_exact() {
        let dims = ModelDims::desk_scale(3);
        let enc = Encoder::init(dims, 4).unwrap();
        let clients = vec![
            ClientModel::init(dims, 4, 0).unwrap(),
            ClientModel::init(dims, 4, 1).unwrap(),
        ];
        let mut ck = Checkpoint::from_models(&enc, &clients);
        ck.header.push("seed=4".into());
        let text = ck.to_text();
        let back = Checkpoint::parse(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_text(), text);

        let mut restored = Encoder::init(dims, 99).unwrap();
        back.restore_params("encoder", restored.params_mut()).unwrap();
        assert_eq!(restored, enc);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::parse("nope\n").is_err());
        let bad = format!("{MAGIC}\ntensor a 2,2\n1 2 3\n");
        assert!(matches!(Checkpoint::parse(&bad), Err(Error::Parse { .. })));
    }
}
