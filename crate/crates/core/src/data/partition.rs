//! Splitting a dataset across clients.
//!
//! The dataset is first split, stratified by class, into a train pool and a
//! test pool. The train pool is then allocated to clients according to the
//! [`PartitionKind`]; every train index lands in exactly one shard. Each
//! client's test set is drawn from the test pool with the same per-class
//! proportions as its train set (test sets of different clients may share
//! samples).

use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::dataset::{indices_by_class, Dataset};
use crate::error::{Error, Result};
use crate::rng::{domain, stream};

/// How many times a Dirichlet allocation that leaves a client empty is
/// redrawn before giving up.
pub const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionKind {
    Iid,
    /// Per-class label proportions over clients drawn from `Dir(alpha)`.
    Dirichlet { alpha: f64 },
    /// Every client holds exactly `classes_per_client` labels.
    Pathological { classes_per_client: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    pub clients: usize,
    pub seed: u64,
    /// Fraction of every class held out as the test pool.
    pub test_fraction: f64,
}

impl PartitionSpec {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("partition needs at least one client".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!(
                "test fraction must be in [0, 1), got {}",
                self.test_fraction
            )));
        }
        match self.kind {
            PartitionKind::Iid => Ok(()),
            PartitionKind::Dirichlet { alpha } if alpha > 0.0 && alpha.is_finite() => Ok(()),
            PartitionKind::Dirichlet { alpha } => {
                Err(Error::Config(format!("dirichlet alpha must be > 0, got {alpha}")))
            }
            PartitionKind::Pathological { classes_per_client: c } if c == 0 || c > classes => Err(
                Error::Config(format!("pathological c must be in 1..={classes}, got {c}")),
            ),
            PartitionKind::Pathological { classes_per_client: c } if c * self.clients < classes => {
                Err(Error::Config(format!(
                    "pathological c = {c} with {} clients cannot cover {classes} classes",
                    self.clients
                )))
            }
            PartitionKind::Pathological { .. } => Ok(()),
        }
    }

    pub fn describe(&self) -> String {
        let kind = match self.kind {
            PartitionKind::Iid => "kind=iid".to_string(),
            PartitionKind::Dirichlet { alpha } => format!("kind=dirichlet alpha={alpha}"),
            PartitionKind::Pathological { classes_per_client } => {
                format!("kind=pathological classes_per_client={classes_per_client}")
            }
        };
        format!(
            "{kind} clients={} seed={} test_fraction={}",
            self.clients, self.seed, self.test_fraction
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientShard {
    pub client_id: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    Ok(partition_detailed(dataset, spec)?.shards)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionOutcome {
    pub shards: Vec<ClientShard>,
    /// Train-pool size of each class.
    pub class_pool: Vec<usize>,
    /// For Dirichlet partitions, the accepted draw: `proportions[class][client]`.
    pub proportions: Option<Vec<Vec<f64>>>,
}

/// [`partition`] plus the intermediate quantities the allocation used.
pub fn partition_detailed(dataset: &Dataset, spec: &PartitionSpec) -> Result<PartitionOutcome> {
    spec.validate(dataset.classes)?;
    let m = spec.clients;
    let mut rng = stream(spec.seed, domain::PARTITION, &[]);

    let mut train_by_class = Vec::with_capacity(dataset.classes);
    let mut test_by_class = Vec::with_capacity(dataset.classes);
    for mut members in indices_by_class(&dataset.labels, dataset.classes) {
        members.shuffle(&mut rng);
        let hold = (members.len() as f64 * spec.test_fraction).round() as usize;
        let train = members.split_off(hold);
        test_by_class.push(members);
        train_by_class.push(train);
    }
    let pool: usize = train_by_class.iter().map(Vec::len).sum();
    if pool < m {
        return Err(Error::Partition(format!(
            "train pool of {pool} samples cannot cover {m} clients"
        )));
    }

    let mut proportions = None;
    let assigned = match spec.kind {
        PartitionKind::Iid => allocate_iid(&train_by_class, m, &mut rng),
        PartitionKind::Dirichlet { alpha } => {
            let (assigned, p) = allocate_dirichlet(&train_by_class, m, alpha, &mut rng)?;
            proportions = Some(p);
            assigned
        }
        PartitionKind::Pathological { classes_per_client } => {
            allocate_pathological(&train_by_class, m, classes_per_client, &mut rng)?
        }
    };

    let ratio = if pool == 0 {
        0.0
    } else {
        test_by_class.iter().map(Vec::len).sum::<usize>() as f64 / pool as f64
    };
    let mut shards = Vec::with_capacity(m);
    for (client_id, mut train) in assigned.into_iter().enumerate() {
        train.sort_unstable();
        let test = draw_test(dataset, &train, &test_by_class, ratio, &mut rng);
        shards.push(ClientShard {
            client_id,
            train,
            test,
        });
    }
    Ok(PartitionOutcome {
        shards,
        class_pool: train_by_class.iter().map(Vec::len).collect(),
        proportions,
    })
}

fn allocate_iid<R: Rng>(by_class: &[Vec<usize>], m: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut all: Vec<usize> = by_class.iter().flatten().copied().collect();
    all.sort_unstable();
    all.shuffle(rng);
    let base = all.len() / m;
    let extra = all.len() % m;
    let mut out = Vec::with_capacity(m);
    let mut start = 0;
    for i in 0..m {
        let size = base + usize::from(i < extra);
        out.push(all[start..start + size].to_vec());
        start += size;
    }
    out
}

/// `Dir(alpha)` draw over `m` components via normalized Gamma variates.
fn dirichlet<R: Rng>(m: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated");
    loop {
        let draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|g| g / sum).collect();
        }
    }
}

/// Integer counts summing to `n` closest to `n·p` (largest remainder).
pub(crate) fn proportional_counts(n: usize, p: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = p.iter().map(|&x| x * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn allocate_dirichlet<R: Rng>(
    by_class: &[Vec<usize>],
    m: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<(Vec<Vec<usize>>, Vec<Vec<f64>>)> {
    for _ in 0..MAX_REDRAWS {
        let mut out = vec![Vec::new(); m];
        let mut drawn = Vec::with_capacity(by_class.len());
        for members in by_class {
            let p = dirichlet(m, alpha, rng);
            let counts = proportional_counts(members.len(), &p);
            let mut start = 0;
            for (client, &c) in counts.iter().enumerate() {
                out[client].extend_from_slice(&members[start..start + c]);
                start += c;
            }
            drawn.push(p);
        }
        if out.iter().all(|s| !s.is_empty()) {
            return Ok((out, drawn));
        }
    }
    Err(Error::Partition(format!(
        "dirichlet(alpha = {alpha}) left a client empty after {MAX_REDRAWS} draws"
    )))
}

/// Client `i` is dealt the classes `perm[(i·c + j) mod C]` for `j < c`; each
/// class's samples are cut into equal contiguous shards, one per holder.
fn allocate_pathological<R: Rng>(
    by_class: &[Vec<usize>],
    m: usize,
    c: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let classes = by_class.len();
    let mut perm: Vec<usize> = (0..classes).collect();
    perm.shuffle(rng);
    let mut holders = vec![Vec::new(); classes];
    for i in 0..m {
        for j in 0..c {
            holders[perm[(i * c + j) % classes]].push(i);
        }
    }
    let mut out = vec![Vec::new(); m];
    for (class, clients) in holders.iter().enumerate() {
        let members = &by_class[class];
        if members.len() < clients.len() {
            return Err(Error::Partition(format!(
                "class {class} has {} train samples for {} pathological shards",
                members.len(),
                clients.len()
            )));
        }
        let counts = proportional_counts(members.len(), &vec![1.0 / clients.len() as f64; clients.len()]);
        let mut start = 0;
        for (&client, &n) in clients.iter().zip(&counts) {
            out[client].extend_from_slice(&members[start..start + n]);
            start += n;
        }
    }
    Ok(out)
}

fn draw_test<R: Rng>(
    dataset: &Dataset,
    train: &[usize],
    test_by_class: &[Vec<usize>],
    ratio: f64,
    rng: &mut R,
) -> Vec<usize> {
    if ratio == 0.0 {
        return Vec::new();
    }
    let mut per_class = vec![0usize; dataset.classes];
    for &i in train {
        per_class[dataset.labels[i]] += 1;
    }
    let mut test = Vec::new();
    for (class, &n) in per_class.iter().enumerate() {
        let pool = &test_by_class[class];
        let want = ((n as f64 * ratio).round() as usize).min(pool.len());
        test.extend(pool.choose_multiple(rng, want).copied());
    }
    if test.is_empty() {
        // tiny shard: keep at least one test sample from its majority class
        let majority = (0..dataset.classes).max_by_key(|&k| (per_class[k], usize::MAX - k));
        if let Some(pool) = majority.map(|k| &test_by_class[k]) {
            test.extend(pool.choose(rng).copied());
        }
    }
    test.sort_unstable();
    test
}

pub const MANIFEST_MAGIC: &str = "fedsplit-partition v1";

/// Line-oriented partition manifest:
///
/// ```text
/// fedsplit-partition v1
/// # <header lines>
/// spec kind=dirichlet alpha=0.3 clients=20 seed=7 test_fraction=0.2
/// client 0 train 3 8 11 ...
/// client 0 test 1 5 ...
/// ```
pub fn manifest_text(spec: &PartitionSpec, shards: &[ClientShard], header: &[String]) -> String {
    let mut out = format!("{MANIFEST_MAGIC}\n");
    for h in header {
        let _ = writeln!(out, "# {h}");
    }
    let _ = writeln!(out, "spec {}", spec.describe());
    for s in shards {
        for (label, idx) in [("train", &s.train), ("test", &s.test)] {
            let _ = write!(out, "client {} {label}", s.client_id);
            for i in idx.iter() {
                let _ = write!(out, " {i}");
            }
            out.push('\n');
        }
    }
    out
}

/// Reads the shards back from a manifest.
pub fn parse_manifest(text: &str) -> Result<Vec<ClientShard>> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l) != Some(MANIFEST_MAGIC) {
        return Err(Error::Parse {
            location: "manifest line 1".into(),
            message: format!("expected '{MANIFEST_MAGIC}'"),
        });
    }
    let mut shards: Vec<ClientShard> = Vec::new();
    for (no, line) in lines {
        if line.starts_with('#') || line.starts_with("spec ") || line.is_empty() {
            continue;
        }
        let bad = |m: String| Error::Parse {
            location: format!("manifest line {}", no + 1),
            message: m,
        };
        let mut f = line.split(' ');
        let (Some("client"), Some(id), Some(which)) = (f.next(), f.next(), f.next()) else {
            return Err(bad(format!("unrecognized line {line:?}")));
        };
        let id: usize = id.parse().map_err(|_| bad(format!("bad client id {id:?}")))?;
        let idx = f
            .map(|s| s.parse::<usize>().map_err(|_| bad(format!("bad index {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if shards.last().map(|s| s.client_id) != Some(id) {
            shards.push(ClientShard {
                client_id: id,
                train: Vec::new(),
                test: Vec::new(),
            });
        }
        let shard = shards.last_mut().unwrap();
        match which {
            "train" => shard.train = idx,
            "test" => shard.test = idx,
            other => return Err(bad(format!("expected train/test, got {other:?}"))),
        }
    }
    Ok(shards)
}
