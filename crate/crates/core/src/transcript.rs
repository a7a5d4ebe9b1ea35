//! Line-oriented log of every payload that crosses the client/server split.
//!
//! One event per line: `<round> <client> <kind> <elements> <bytes>`.
//! Payload sizes count 8 bytes per `f64` element.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const BYTES_PER_ELEMENT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageKind {
    /// `h`, client → server.
    Feature,
    /// `b`, server → client.
    Smashed,
    /// `∂L/∂b`, client → server.
    SmashedGrad,
    /// `∂L/∂h`, server → client.
    FeatureGrad,
    /// `E(w_E + εz; h)`, server → client.
    ZoSmashedPlus,
    /// `E(w_E − εz; h)`, server → client.
    ZoSmashedMinus,
    /// scalar loss at `w_E + εz`, client → server.
    ZoLossPlus,
    /// scalar loss at `w_E − εz`, client → server.
    ZoLossMinus,
    /// head and tail weights, participant → server.
    AggregateUpload,
    /// averaged head and tail weights, server → every client.
    AggregateBroadcast,
    /// full model, server → participant (FedAvg baseline).
    ModelDownload,
    /// full model, participant → server (FedAvg baseline).
    ModelUpload,
}

impl MessageKind {
    pub const ALL: [MessageKind; 12] = [
        MessageKind::Feature,
        MessageKind::Smashed,
        MessageKind::SmashedGrad,
        MessageKind::FeatureGrad,
        MessageKind::ZoSmashedPlus,
        MessageKind::ZoSmashedMinus,
        MessageKind::ZoLossPlus,
        MessageKind::ZoLossMinus,
        MessageKind::AggregateUpload,
        MessageKind::AggregateBroadcast,
        MessageKind::ModelDownload,
        MessageKind::ModelUpload,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::Feature => "feature",
            MessageKind::Smashed => "smashed",
            MessageKind::SmashedGrad => "smashed_grad",
            MessageKind::FeatureGrad => "feature_grad",
            MessageKind::ZoSmashedPlus => "zo_smashed_plus",
            MessageKind::ZoSmashedMinus => "zo_smashed_minus",
            MessageKind::ZoLossPlus => "zo_loss_plus",
            MessageKind::ZoLossMinus => "zo_loss_minus",
            MessageKind::AggregateUpload => "aggregate_upload",
            MessageKind::AggregateBroadcast => "aggregate_broadcast",
            MessageKind::ModelDownload => "model_download",
            MessageKind::ModelUpload => "model_upload",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_upstream(self) -> bool {
        matches!(
            self,
            MessageKind::Feature
                | MessageKind::SmashedGrad
                | MessageKind::ZoLossPlus
                | MessageKind::ZoLossMinus
                | MessageKind::AggregateUpload
                | MessageKind::ModelUpload
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub round: usize,
    pub client: usize,
    pub kind: MessageKind,
    pub elements: usize,
}

impl Event {
    pub fn bytes(&self) -> usize {
        self.elements * BYTES_PER_ELEMENT
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    pub events: Vec<Event>,
}

impl Transcript {
    pub fn record(&mut self, round: usize, client: usize, kind: MessageKind, elements: usize) {
        self.events.push(Event {
            round,
            client,
            kind,
            elements,
        });
    }

    pub fn extend(&mut self, events: impl IntoIterator<Item = Event>) {
        self.events.extend(events);
    }

    pub fn round_events(&self, round: usize) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.round == round)
    }

    /// `(upstream, downstream)` bytes in `round`.
    pub fn round_bytes(&self, round: usize) -> (usize, usize) {
        self.round_events(round).fold((0, 0), |(up, down), e| {
            if e.kind.is_upstream() {
                (up + e.bytes(), down)
            } else {
                (up, down + e.bytes())
            }
        })
    }

    pub fn bytes_of_kind(&self, round: usize, kind: MessageKind) -> usize {
        self.round_events(round).filter(|e| e.kind == kind).map(Event::bytes).sum()
    }

    pub fn count_of_kind(&self, kind: MessageKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# round client kind elements bytes\n");
        for e in &self.events {
            let _ = writeln!(
                out,
                "{} {} {} {} {}",
                e.round,
                e.client,
                e.kind.name(),
                e.elements,
                e.bytes()
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut t = Transcript::default();
        for (i, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Parse {
                location: format!("transcript line {}", i + 1),
                message: format!("{m}: {line:?}"),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            let [round, client, kind, elements, bytes] = f.as_slice() else {
                return Err(bad("expected 5 fields"));
            };
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
            let ev = Event {
                round: num(round)?,
                client: num(client)?,
                kind: MessageKind::parse(kind).ok_or_else(|| bad("unknown message kind"))?,
                elements: num(elements)?,
            };
            if ev.bytes() != num(bytes)? {
                return Err(bad("byte count disagrees with element count"));
            }
            t.events.push(ev);
        }
        Ok(t)
    }
}
