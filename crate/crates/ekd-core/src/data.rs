//! Synthetic identity datasets, balanced mini-batches, and evaluation pairs.
//!
//! A dataset is a set of identity prototypes drawn uniformly on the unit
//! sphere, with each sample being its prototype plus isotropic Gaussian
//! noise. That gives overlapping same-identity / cross-identity similarity
//! distributions, so FPR-anchored thresholds land in a nontrivial range.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{EkdError, Result};
use crate::numeric::Matrix;
use crate::pairs::PairSet;
use crate::rng::RngState;

/// Parameters that fully determine a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub input_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(EkdError::InvalidConfig(format!(
                "num_identities must be >= 2 (negative pairs must exist), got {}",
                self.num_identities
            )));
        }
        if self.samples_per_identity < 2 {
            return Err(EkdError::InvalidConfig(format!(
                "samples_per_identity must be >= 2 (positive pairs must exist), got {}",
                self.samples_per_identity
            )));
        }
        if self.input_dim < 2 {
            return Err(EkdError::InvalidConfig(format!(
                "input_dim must be >= 2, got {}",
                self.input_dim
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(EkdError::InvalidConfig(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Feature rows plus one identity label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_identities: usize,
}

impl LabeledDataset {
    pub fn num_samples(&self) -> usize {
        self.features.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// Sample indices grouped by identity, identity-ascending.
    pub fn indices_by_identity(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_identities];
        for (i, &label) in self.labels.iter().enumerate() {
            groups[label].push(i);
        }
        groups
    }
}

/// One balanced mini-batch: `p` identities with `q` samples each.
#[derive(Debug, Clone)]
pub struct BalancedBatch {
    pub sample_indices: Vec<usize>,
    pub p: usize,
    pub q: usize,
}

impl BalancedBatch {
    pub fn size(&self) -> usize {
        self.p * self.q
    }
}

/// Prototypes uniform on the unit sphere; samples are prototype plus
/// isotropic Gaussian noise. Pure function of the spec.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut proto_rng = RngState::new(spec.seed).derive("prototypes");
    let mut noise_rng = RngState::new(spec.seed).derive("noise");

    let n = spec.num_identities * spec.samples_per_identity;
    let mut features = Matrix::zeros(n, spec.input_dim);
    let mut labels = Vec::with_capacity(n);

    for id in 0..spec.num_identities {
        let mut proto = vec![0.0; spec.input_dim];
        loop {
            let mut sq = 0.0;
            for v in proto.iter_mut() {
                *v = proto_rng.normal();
                sq += *v * *v;
            }
            let norm = sq.sqrt();
            if norm > 1e-12 {
                for v in proto.iter_mut() {
                    *v /= norm;
                }
                break;
            }
        }
        for s in 0..spec.samples_per_identity {
            let row = features.row_mut(id * spec.samples_per_identity + s);
            for (j, v) in row.iter_mut().enumerate() {
                *v = proto[j] + spec.noise_sigma * noise_rng.normal();
            }
            labels.push(id);
        }
    }

    Ok(LabeledDataset {
        features,
        labels,
        num_identities: spec.num_identities,
    })
}

/// One epoch of balanced batches: identities shuffled, `q` samples drawn
/// without replacement per identity per batch, trailing identities that
/// cannot fill a batch dropped.
pub fn make_balanced_batches(
    dataset: &LabeledDataset,
    p: usize,
    q: usize,
    rng: &mut RngState,
) -> Result<Vec<BalancedBatch>> {
    if p == 0 || q == 0 {
        return Err(EkdError::InvalidConfig(format!(
            "balanced batch needs p > 0 and q > 0, got p={p} q={q}"
        )));
    }
    if p > dataset.num_identities {
        return Err(EkdError::InvalidConfig(format!(
            "p={p} exceeds the {} identities available",
            dataset.num_identities
        )));
    }
    let groups = dataset.indices_by_identity();
    if let Some(short) = groups.iter().position(|g| g.len() < q) {
        return Err(EkdError::InvalidConfig(format!(
            "q={q} exceeds the {} samples of identity {short}",
            groups[short].len()
        )));
    }

    let mut identity_order: Vec<usize> = (0..dataset.num_identities).collect();
    rng.shuffle(&mut identity_order);

    let num_batches = dataset.num_identities / p;
    let mut batches = Vec::with_capacity(num_batches);
    for b in 0..num_batches {
        let mut sample_indices = Vec::with_capacity(p * q);
        for &id in &identity_order[b * p..(b + 1) * p] {
            let group = &groups[id];
            for local in rng.sample_indices(group.len(), q) {
                sample_indices.push(group[local]);
            }
        }
        batches.push(BalancedBatch { sample_indices, p, q });
    }
    Ok(batches)
}

/// Deterministically sampled positive and negative pairs over a held-out
/// dataset, capped at `max_pos` / `max_neg`.
pub fn build_eval_pairs(
    dataset: &LabeledDataset,
    max_pos: usize,
    max_neg: usize,
    rng: &mut RngState,
) -> Result<PairSet> {
    let groups = dataset.indices_by_identity();

    let mut pos: Vec<(usize, usize)> = Vec::new();
    for group in &groups {
        for a in 0..group.len() {
            for b in (a + 1)..group.len() {
                pos.push((group[a], group[b]));
            }
        }
    }
    if pos.is_empty() {
        return Err(EkdError::EmptyInput("no positive pairs in evaluation data"));
    }
    if pos.len() > max_pos {
        let keep = rng.sample_indices(pos.len(), max_pos);
        pos = keep.into_iter().map(|i| pos[i]).collect();
    }

    let n = dataset.num_samples();
    let total_pairs = n * (n - 1) / 2;
    let neg_available = total_pairs
        - groups
            .iter()
            .map(|g| g.len() * (g.len() - 1) / 2)
            .sum::<usize>();
    let mut neg: Vec<(usize, usize)> = Vec::new();
    if neg_available <= max_neg {
        for i in 0..n {
            for j in (i + 1)..n {
                if dataset.labels[i] != dataset.labels[j] {
                    neg.push((i, j));
                }
            }
        }
    } else {
        // Rejection sampling of distinct cross-identity pairs; deterministic
        // given the rng stream.
        let mut seen = std::collections::BTreeSet::new();
        while neg.len() < max_neg {
            let i = rng.below(n);
            let j = rng.below(n);
            if i == j || dataset.labels[i] == dataset.labels[j] {
                continue;
            }
            let pair = (i.min(j), i.max(j));
            if seen.insert(pair) {
                neg.push(pair);
            }
        }
        neg.sort_unstable();
    }

    Ok(PairSet {
        pos_pairs: pos,
        neg_pairs: neg,
    })
}

const EKDS_MAGIC: &[u8; 8] = b"EKDSETv1";

/// Write the dataset in the EKDS binary format: magic, little-endian u32
/// counts, f32 feature rows, u32 labels.
pub fn save_dataset(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::with_capacity(
        8 + 12 + dataset.num_samples() * dataset.input_dim() * 4 + dataset.num_samples() * 4,
    );
    buf.extend_from_slice(EKDS_MAGIC);
    buf.extend_from_slice(&(dataset.num_samples() as u32).to_le_bytes());
    buf.extend_from_slice(&(dataset.input_dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(dataset.num_identities as u32).to_le_bytes());
    for v in dataset.features.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for &label in &dataset.labels {
        buf.extend_from_slice(&(label as u32).to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let format_err = |message: &str| EkdError::FileFormat {
        path: path.display().to_string(),
        message: message.to_string(),
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != EKDS_MAGIC {
        return Err(format_err("not an EKDS dataset (bad magic)"));
    }
    let read_u32 = |offset: usize| {
        u32::from_le_bytes([
            bytes[offset],
            bytes[offset + 1],
            bytes[offset + 2],
            bytes[offset + 3],
        ]) as usize
    };
    let num_samples = read_u32(8);
    let input_dim = read_u32(12);
    let num_identities = read_u32(16);
    let expected = 20 + num_samples * input_dim * 4 + num_samples * 4;
    if bytes.len() != expected {
        return Err(format_err(&format!(
            "truncated or oversized payload: expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut features = Matrix::zeros(num_samples, input_dim);
    let mut offset = 20;
    for v in features.data_mut() {
        *v = f32::from_le_bytes([
            bytes[offset],
            bytes[offset + 1],
            bytes[offset + 2],
            bytes[offset + 3],
        ]) as f64;
        offset += 4;
    }
    let mut labels = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        let label = read_u32(offset);
        if label >= num_identities {
            return Err(format_err(&format!(
                "label {label} out of range (num_identities {num_identities})"
            )));
        }
        labels.push(label);
        offset += 4;
    }
    Ok(LabeledDataset {
        features,
        labels,
        num_identities,
    })
}

/// Debug-friendly CSV mirror of the EKDS format: `label,f0,f1,...` per row.
pub fn export_dataset_csv(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("label");
    for j in 0..dataset.input_dim() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for i in 0..dataset.num_samples() {
        out.push_str(&format!("{}", dataset.labels[i]));
        for v in dataset.features.row(i) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Mean cosine similarity within identities and across identities, measured
/// in input space. Useful as a quick sanity summary of a generated dataset.
pub fn similarity_summary(dataset: &LabeledDataset) -> (f64, f64) {
    let (unit, _) = crate::numeric::row_l2_normalize(&dataset.features)
        .expect("dataset rows must be non-degenerate");
    let n = dataset.num_samples();
    let mut intra_sum = 0.0;
    let mut intra_count = 0usize;
    let mut inter_sum = 0.0;
    let mut inter_count = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let dot: f64 = unit
                .row(i)
                .iter()
                .zip(unit.row(j))
                .map(|(a, b)| a * b)
                .sum();
            if dataset.labels[i] == dataset.labels[j] {
                intra_sum += dot;
                intra_count += 1;
            } else {
                inter_sum += dot;
                inter_count += 1;
            }
        }
    }
    (
        intra_sum / intra_count.max(1) as f64,
        inter_sum / inter_count.max(1) as f64,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            num_identities: 10,
            samples_per_identity: 4,
            input_dim: 8,
            noise_sigma: 0.2,
            seed: 5,
        }
    }

    #[test]
    fn zero_noise_collapses_to_prototypes() {
        let spec = DatasetSpec {
            noise_sigma: 0.0,
            ..small_spec()
        };
        let ds = generate_dataset(&spec).unwrap();
        for id in 0..spec.num_identities {
            let base = ds.features.row(id * spec.samples_per_identity).to_vec();
            for s in 1..spec.samples_per_identity {
                assert_eq!(ds.features.row(id * spec.samples_per_identity + s), &base[..]);
            }
            let norm: f64 = base.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12, "prototype not unit");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small_spec()).unwrap();
        let b = generate_dataset(&small_spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn intra_similarity_exceeds_inter() {
        let spec = DatasetSpec {
            num_identities: 200,
            samples_per_identity: 20,
            input_dim: 64,
            noise_sigma: 0.3,
            seed: 7,
        };
        let ds = generate_dataset(&spec).unwrap();
        let (intra, inter) = similarity_summary(&ds);
        assert!(
            intra > inter,
            "expected intra ({intra}) > inter ({inter}) mean cosine"
        );
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut spec = small_spec();
        spec.input_dim = 1;
        assert!(generate_dataset(&spec).is_err());
        let mut spec = small_spec();
        spec.num_identities = 1;
        assert!(generate_dataset(&spec).is_err());
        let mut spec = small_spec();
        spec.samples_per_identity = 1;
        assert!(generate_dataset(&spec).is_err());
    }

    #[test]
    fn balanced_batches_have_exact_composition() {
        let ds = generate_dataset(&small_spec()).unwrap();
        let mut rng = RngState::new(1);
        let batches = make_balanced_batches(&ds, 3, 2, &mut rng).unwrap();
        // 10 identities / p=3 -> 3 batches, 1 identity dropped.
        assert_eq!(batches.len(), 3);
        for batch in &batches {
            assert_eq!(batch.sample_indices.len(), 6);
            let mut counts = std::collections::BTreeMap::new();
            for &i in &batch.sample_indices {
                *counts.entry(ds.labels[i]).or_insert(0usize) += 1;
            }
            assert_eq!(counts.len(), 3, "expected 3 distinct identities");
            assert!(counts.values().all(|&c| c == 2), "expected 2 samples each");
            // without replacement within the batch
            let mut uniq = batch.sample_indices.clone();
            uniq.sort_unstable();
            uniq.dedup();
            assert_eq!(uniq.len(), 6);
        }
    }

    #[test]
    fn five_identities_p2_gives_two_batches() {
        let spec = DatasetSpec {
            num_identities: 5,
            samples_per_identity: 2,
            ..small_spec()
        };
        let ds = generate_dataset(&spec).unwrap();
        let mut rng = RngState::new(2);
        let batches = make_balanced_batches(&ds, 2, 2, &mut rng).unwrap();
        assert_eq!(batches.len(), 2);
    }

    #[test]
    fn batch_guards() {
        let ds = generate_dataset(&small_spec()).unwrap();
        let mut rng = RngState::new(3);
        assert!(make_balanced_batches(&ds, 0, 2, &mut rng).is_err());
        assert!(make_balanced_batches(&ds, 11, 2, &mut rng).is_err());
        assert!(make_balanced_batches(&ds, 2, 5, &mut rng).is_err());
    }

    #[test]
    fn eval_pairs_counts_and_determinism() {
        let ds = generate_dataset(&small_spec()).unwrap();
        let mut rng = RngState::new(4);
        let pairs = build_eval_pairs(&ds, usize::MAX, usize::MAX, &mut rng).unwrap();
        // 10 identities * C(4,2) positives
        assert_eq!(pairs.pos_pairs.len(), 60);
        let total = ds.num_samples() * (ds.num_samples() - 1) / 2;
        assert_eq!(pairs.neg_pairs.len(), total - 60);

        let mut rng_a = RngState::new(4);
        let mut rng_b = RngState::new(4);
        let a = build_eval_pairs(&ds, 30, 100, &mut rng_a).unwrap();
        let b = build_eval_pairs(&ds, 30, 100, &mut rng_b).unwrap();
        assert_eq!(a.pos_pairs, b.pos_pairs);
        assert_eq!(a.neg_pairs, b.neg_pairs);
        assert_eq!(a.pos_pairs.len(), 30);
        assert_eq!(a.neg_pairs.len(), 100);
        for &(i, j) in a.neg_pairs.iter() {
            assert!(i < j);
            assert_ne!(ds.labels[i], ds.labels[j]);
        }
    }

    #[test]
    fn ekds_round_trip_quantizes_to_f32() {
        let ds = generate_dataset(&small_spec()).unwrap();
        let dir = std::env::temp_dir().join(format!("ekds-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ekds");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.labels, ds.labels);
        assert_eq!(loaded.num_identities, ds.num_identities);
        for (a, b) in loaded.features.data().iter().zip(ds.features.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        // saving the load is byte-stable
        let path2 = dir.join("roundtrip2.ekds");
        save_dataset(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = std::env::temp_dir().join(format!("ekds-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ekds");
        std::fs::write(&path, b"not a dataset").unwrap();
        assert!(load_dataset(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
