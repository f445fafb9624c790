//! Unstructured magnitude pruning over the prunable (linear weight) tensors.
//!
//! A mask keeps `1` and prunes `0`. Under per-layer scope each tensor with `N`
//! elements loses exactly `floor(p·N)` of its smallest-magnitude entries;
//! equal magnitudes are broken by ascending flat index. Global scope ranks
//! every prunable element together (ties by position in model order).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::archive::{self, ArchiveData, ArchiveEntry};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    #[default]
    PerLayer,
    Global,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// One byte per element: 1 kept, 0 pruned.
    pub keep: Vec<u8>,
}

impl MaskEntry {
    pub fn pruned(&self) -> usize {
        self.keep.iter().filter(|&&k| k == 0).count()
    }
}

/// Binary masks over a model's prunable parameters, recorded at one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    ratio: f64,
    epoch: usize,
    scope: PruneScope,
    entries: Vec<MaskEntry>,
}

/// Normalized Hamming distance between two masks, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct MaskDistance(f64);

impl MaskDistance {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Number of elements pruned from a tensor of `n` elements at ratio `p`.
///
/// This is `floor(p·n)`, except that products within 1e-9 (relative) of an
/// integer snap to it, so `0.29 · 100` prunes 29 rather than 28.
pub fn pruned_count(p: f64, n: usize) -> usize {
    let x = p * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r as usize
    } else {
        x.floor() as usize
    }
}

fn check_ratio(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Domain(format!("pruning ratio {p} outside [0, 1]")))
    }
}

impl PruneMask {
    /// Validates bit values and shapes. The zero count is not checked, so
    /// arbitrary masks (loaded or synthetic) are representable.
    pub fn new(
        ratio: f64,
        epoch: usize,
        scope: PruneScope,
        entries: Vec<MaskEntry>,
    ) -> Result<Self> {
        check_ratio(ratio)?;
        for (i, e) in entries.iter().enumerate() {
            if e.shape.iter().product::<usize>() != e.keep.len() {
                return Err(Error::Mask(format!(
                    "{}: shape {:?} vs {} bits",
                    e.name,
                    e.shape,
                    e.keep.len()
                )));
            }
            if e.keep.iter().any(|&b| b > 1) {
                return Err(Error::Mask(format!("{}: mask bits must be 0 or 1", e.name)));
            }
            if entries[..i].iter().any(|o| o.name == e.name) {
                return Err(Error::Mask(format!("duplicate mask entry {}", e.name)));
            }
        }
        Ok(PruneMask {
            ratio,
            epoch,
            scope,
            entries,
        })
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn scope(&self) -> PruneScope {
        self.scope
    }

    pub fn entries(&self) -> &[MaskEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&MaskEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn with_epoch(mut self, epoch: usize) -> Self {
        self.epoch = epoch;
        self
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.keep.len()).sum()
    }

    fn check_compatible(&self, other: &PruneMask) -> Result<()> {
        if self.ratio != other.ratio {
            return Err(Error::Mask(format!(
                "ratio {} vs {}",
                self.ratio, other.ratio
            )));
        }
        if self.entries.len() != other.entries.len() {
            return Err(Error::Mask(format!(
                "{} entries vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Mask(format!(
                    "{} {:?} vs {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }
}

/// Sort key for magnitude selection: `(|w|, position)`, a total order.
fn by_magnitude(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Keep-bits for one flat buffer, pruning the `n_prune` smallest magnitudes.
pub fn magnitude_keep<T: Scalar>(values: &[T], n_prune: usize) -> Vec<u8> {
    let mut keep = vec![1u8; values.len()];
    if n_prune == 0 {
        return keep;
    }
    let mut keyed: Vec<(f64, usize)> = values
        .iter()
        .enumerate()
        .map(|(i, v)| (v.as_f64().abs(), i))
        .collect();
    if n_prune < keyed.len() {
        keyed.select_nth_unstable_by(n_prune - 1, by_magnitude);
    }
    for &(_, i) in &keyed[..n_prune.min(keyed.len())] {
        keep[i] = 0;
    }
    keep
}

/// Magnitude mask over `model`'s prunable tensors at ratio `p`, epoch 0.
/// The model is not modified.
pub fn compute_mask<T: Scalar>(model: &Model<T>, p: f64, scope: PruneScope) -> Result<PruneMask> {
    check_ratio(p)?;
    let prunable: Vec<_> = model.prunable().collect();
    let entries = match scope {
        PruneScope::PerLayer => prunable
            .iter()
            .map(|param| MaskEntry {
                name: param.name.clone(),
                shape: param.tensor.shape().to_vec(),
                keep: magnitude_keep(param.tensor.data(), pruned_count(p, param.tensor.numel())),
            })
            .collect(),
        PruneScope::Global => {
            let flat: Vec<T> = prunable
                .iter()
                .flat_map(|p| p.tensor.data().iter().copied())
                .collect();
            let keep = magnitude_keep(&flat, pruned_count(p, flat.len()));
            let mut offset = 0;
            prunable
                .iter()
                .map(|param| {
                    let n = param.tensor.numel();
                    let e = MaskEntry {
                        name: param.name.clone(),
                        shape: param.tensor.shape().to_vec(),
                        keep: keep[offset..offset + n].to_vec(),
                    };
                    offset += n;
                    e
                })
                .collect()
        }
    };
    PruneMask::new(p, 0, scope, entries)
}

fn check_coverage<T: Scalar>(model: &Model<T>, mask: &PruneMask) -> Result<()> {
    let prunable: Vec<_> = model.prunable().collect();
    if prunable.len() != mask.entries.len() {
        return Err(Error::Mask(format!(
            "mask covers {} tensors, model has {} prunable",
            mask.entries.len(),
            prunable.len()
        )));
    }
    for (p, e) in prunable.iter().zip(&mask.entries) {
        if p.name != e.name || p.tensor.shape() != e.shape.as_slice() {
            return Err(Error::Mask(format!(
                "mask entry {} {:?} does not match parameter {} {:?}",
                e.name,
                e.shape,
                p.name,
                p.tensor.shape()
            )));
        }
    }
    Ok(())
}

/// Zeroes the masked weights and makes `mask` the model's active mask, so the
/// trainer keeps those positions at exactly zero. Idempotent.
pub fn apply_mask<T: Scalar>(model: &mut Model<T>, mask: &PruneMask) -> Result<()> {
    check_coverage(model, mask)?;
    model.set_active_mask(Some(mask.clone()));
    model.enforce_mask();
    Ok(())
}

impl<T: Scalar> Model<T> {
    /// Re-zeroes weights under the active mask, if any.
    pub fn enforce_mask(&mut self) {
        let Some(mask) = self.active_mask().cloned() else {
            return;
        };
        for e in &mask.entries {
            if let Some(p) = self.parameter_mut(&e.name) {
                for (w, &k) in p.tensor.data_mut().iter_mut().zip(&e.keep) {
                    if k == 0 {
                        *w = T::zero();
                    }
                }
            }
        }
    }

    /// Zeroes gradients under the active mask, if any.
    pub fn mask_gradients(&mut self) {
        let Some(mask) = self.active_mask().cloned() else {
            return;
        };
        for e in &mask.entries {
            if let Some(g) = self
                .parameter_mut(&e.name)
                .and_then(|p| p.tensor.grad_mut())
            {
                for (g, &k) in g.iter_mut().zip(&e.keep) {
                    if k == 0 {
                        *g = T::zero();
                    }
                }
            }
        }
    }
}

/// Number of element positions where `a` and `b` differ.
pub fn hamming(a: &PruneMask, b: &PruneMask) -> Result<usize> {
    a.check_compatible(b)?;
    Ok(a.entries
        .iter()
        .zip(&b.entries)
        .map(|(x, y)| x.keep.iter().zip(&y.keep).filter(|(p, q)| p != q).count())
        .sum())
}

/// Fraction of element positions where `a` and `b` differ.
pub fn mask_distance(a: &PruneMask, b: &PruneMask) -> Result<MaskDistance> {
    let differing = hamming(a, b)?;
    let total = a.total_elements();
    if total == 0 {
        return Ok(MaskDistance(0.0));
    }
    Ok(MaskDistance(differing as f64 / total as f64))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSparsity {
    pub name: String,
    pub total: usize,
    pub kept: usize,
    pub pruned: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub tensors: Vec<TensorSparsity>,
    pub total: usize,
    pub kept: usize,
    pub pruned: usize,
}

pub fn sparsity_report(mask: &PruneMask) -> SparsityReport {
    let tensors: Vec<TensorSparsity> = mask
        .entries
        .iter()
        .map(|e| {
            let pruned = e.pruned();
            TensorSparsity {
                name: e.name.clone(),
                total: e.keep.len(),
                kept: e.keep.len() - pruned,
                pruned,
            }
        })
        .collect();
    let total = tensors.iter().map(|t| t.total).sum();
    let pruned = tensors.iter().map(|t| t.pruned).sum();
    SparsityReport {
        tensors,
        total,
        kept: total - pruned,
        pruned,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskManifest {
    pub p: f64,
    pub epoch: usize,
    pub scope: PruneScope,
}

/// Writes `<stem>.ebkt` (one u8 tensor per parameter) and `<stem>.json`.
pub fn save_mask(mask: &PruneMask, stem: &Path) -> Result<()> {
    let entries: Vec<ArchiveEntry> = mask
        .entries
        .iter()
        .map(|e| ArchiveEntry {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data: ArchiveData::U8(e.keep.clone()),
        })
        .collect();
    archive::write(&stem.with_extension("ebkt"), &entries)?;
    crate::io::write_json_atomic(
        &stem.with_extension("json"),
        &MaskManifest {
            p: mask.ratio,
            epoch: mask.epoch,
            scope: mask.scope,
        },
    )
}

pub fn load_mask(stem: &Path) -> Result<PruneMask> {
    let manifest_path = stem.with_extension("json");
    let manifest: MaskManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    let tensors = stem.with_extension("ebkt");
    let entries = archive::read(&tensors)?
        .into_iter()
        .map(|e| match e.data {
            ArchiveData::U8(keep) => Ok(MaskEntry {
                name: e.name,
                shape: e.shape,
                keep,
            }),
            _ => Err(Error::format(
                &tensors,
                format!("mask entry {} is not u8", e.name),
            )),
        })
        .collect::<Result<Vec<_>>>()?;
    PruneMask::new(manifest.p, manifest.epoch, manifest.scope, entries)
}

/// Mask stems (`.../epoch_0003`) in a directory, sorted by file name.
pub fn mask_stems(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut stems: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ebkt"))
        .map(|p| p.with_extension(""))
        .collect();
    stems.sort();
    Ok(stems)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Parameter};
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn single(bits: &[u8]) -> PruneMask {
        PruneMask::new(
            0.5,
            0,
            PruneScope::PerLayer,
            vec![MaskEntry {
                name: "w".into(),
                shape: vec![bits.len()],
                keep: bits.to_vec(),
            }],
        )
        .unwrap()
    }

    #[test]
    fn four_weight_examples() {
        assert_eq!(
            magnitude_keep(&[0.5f64, -0.1, 0.3, -0.7], pruned_count(0.25, 4)),
            vec![1, 0, 1, 1]
        );
        assert_eq!(
            magnitude_keep(&[0.2f64, -0.2, 0.9, 0.9], pruned_count(0.25, 4)),
            vec![0, 1, 1, 1]
        );
        assert_eq!(
            magnitude_keep(&[0.5f64, -0.1, 0.3], pruned_count(0.0, 3)),
            vec![1, 1, 1]
        );
        assert_eq!(
            magnitude_keep(&[0.5f64, -0.1, 0.3], pruned_count(1.0, 3)),
            vec![0, 0, 0]
        );
    }

    #[test]
    fn pruned_counts() {
        assert_eq!(pruned_count(0.3, 10), 3);
        assert_eq!(pruned_count(0.3, 9), 2);
        assert_eq!(pruned_count(0.29, 100), 29);
        assert_eq!(pruned_count(0.1, 30), 3);
        assert_eq!(pruned_count(1.0, 7), 7);
    }

    #[test]
    fn distance_examples() {
        let a = single(&[1, 1, 0, 0]);
        assert_eq!(mask_distance(&a, &a).unwrap().value(), 0.0);
        assert_eq!(
            mask_distance(&a, &single(&[0, 0, 1, 1])).unwrap().value(),
            1.0
        );
        let x = single(&[1, 0, 1, 1, 0, 0, 1, 0]);
        let y = single(&[1, 1, 1, 0, 0, 0, 1, 0]);
        assert_eq!(mask_distance(&x, &y).unwrap().value(), 0.25);
    }

    #[test]
    fn distance_rejects_coverage_mismatch() {
        let a = single(&[1, 1, 0, 0]);
        let b = single(&[1, 1, 0]);
        assert!(matches!(mask_distance(&a, &b), Err(Error::Mask(_))));
        let c = PruneMask::new(0.3, 0, PruneScope::PerLayer, a.entries().to_vec()).unwrap();
        assert!(matches!(mask_distance(&a, &c), Err(Error::Mask(_))));
    }

    #[test]
    fn rejects_bad_ratio() {
        let m = Model::<f64>::build(&ModelConfig::text(11, 6, 2), 0).unwrap();
        assert!(matches!(
            compute_mask(&m, 1.5, PruneScope::PerLayer),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            compute_mask(&m, -0.1, PruneScope::Global),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn sparsity_counts() {
        let m = PruneMask::new(
            0.3,
            1,
            PruneScope::PerLayer,
            vec![
                MaskEntry {
                    name: "a".into(),
                    shape: vec![10],
                    keep: magnitude_keep(
                        &(0..10).map(f64::from).collect::<Vec<_>>(),
                        pruned_count(0.3, 10),
                    ),
                },
                MaskEntry {
                    name: "b".into(),
                    shape: vec![9],
                    keep: magnitude_keep(
                        &(0..9).map(f64::from).collect::<Vec<_>>(),
                        pruned_count(0.3, 9),
                    ),
                },
            ],
        )
        .unwrap();
        let r = sparsity_report(&m);
        assert_eq!(r.tensors[0].pruned, 3);
        assert_eq!(r.tensors[1].pruned, 2);
        assert_eq!((r.total, r.kept, r.pruned), (19, 14, 5));

        let empty = sparsity_report(&PruneMask::new(0.3, 0, PruneScope::PerLayer, vec![]).unwrap());
        assert_eq!((empty.total, empty.kept, empty.pruned), (0, 0, 0));
    }

    #[test]
    fn per_layer_mask_counts_and_non_destructive() {
        let m = Model::<f32>::build(&ModelConfig::text(11, 6, 2), 3).unwrap();
        let before = m.clone();
        let mask = compute_mask(&m, 0.3, PruneScope::PerLayer).unwrap();
        assert_eq!(m, before);
        let names: Vec<_> = m.prunable().map(|p| p.name.clone()).collect();
        let covered: Vec<_> = mask.entries().iter().map(|e| e.name.clone()).collect();
        assert_eq!(names, covered);
        for e in mask.entries() {
            assert_eq!(e.pruned(), pruned_count(0.3, e.keep.len()));
        }
    }

    #[test]
    fn global_mask_total_count() {
        let m = Model::<f32>::build(&ModelConfig::text(11, 6, 2), 3).unwrap();
        let mask = compute_mask(&m, 0.3, PruneScope::Global).unwrap();
        let r = sparsity_report(&mask);
        assert_eq!(r.pruned, pruned_count(0.3, r.total));
    }

    #[test]
    fn apply_mask_idempotent_and_identity() {
        let mut m = Model::<f32>::build(&ModelConfig::text(11, 6, 2), 1).unwrap();
        let ones = compute_mask(&m, 0.0, PruneScope::PerLayer).unwrap();
        let before = m.parameters().to_vec();
        apply_mask(&mut m, &ones).unwrap();
        assert_eq!(m.parameters(), before.as_slice());

        let mask = compute_mask(&m, 0.5, PruneScope::PerLayer).unwrap();
        apply_mask(&mut m, &mask).unwrap();
        let once = m.parameters().to_vec();
        apply_mask(&mut m, &mask).unwrap();
        assert_eq!(m.parameters(), once.as_slice());
        for e in mask.entries() {
            let w = m.parameter(&e.name).unwrap().tensor.data();
            for (v, &k) in w.iter().zip(&e.keep) {
                if k == 0 {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn apply_mask_rejects_foreign_mask() {
        let mut m = Model::<f32>::build(&ModelConfig::text(11, 6, 2), 1).unwrap();
        assert!(matches!(
            apply_mask(&mut m, &single(&[1, 0])),
            Err(Error::Mask(_))
        ));
    }

    #[test]
    fn mask_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::<f32>::build(&ModelConfig::text(11, 6, 2), 1).unwrap();
        let mask = compute_mask(&m, 0.3, PruneScope::PerLayer)
            .unwrap()
            .with_epoch(4);
        let stem = dir.path().join("epoch_0004");
        save_mask(&mask, &stem).unwrap();
        assert_eq!(load_mask(&stem).unwrap(), mask);
        assert_eq!(mask_stems(dir.path()).unwrap(), vec![stem]);
    }

    /// Brute-force oracle: full stable sort by magnitude.
    fn oracle(values: &[f64], p: f64) -> Vec<u8> {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].abs().partial_cmp(&values[b].abs()).unwrap());
        let mut keep = vec![1; values.len()];
        for &i in &order[..pruned_count(p, values.len())] {
            keep[i] = 0;
        }
        keep
    }

    proptest! {
        #[test]
        fn matches_sort_oracle(
            values in prop::collection::vec(prop_oneof![-1.0f64..1.0, (-3i32..=3).prop_map(|k| k as f64 * 0.25)], 1..400),
            p in 0.0f64..=1.0,
        ) {
            prop_assert_eq!(magnitude_keep(&values, pruned_count(p, values.len())), oracle(&values, p));
        }

        #[test]
        fn selection_is_scale_invariant(seed in 0u64..1000, c in 0.01f64..100.0, p in 0.0f64..=1.0) {
            let m = Model::<f64>::build(&ModelConfig::text(11, 6, 2), seed).unwrap();
            let before = compute_mask(&m, p, PruneScope::PerLayer).unwrap();
            let params = m.parameters().iter().map(|q| {
                let mut q = q.clone();
                if q.name == "blocks.0.attn.q.weight" {
                    let scaled: Vec<f64> = q.tensor.data().iter().map(|v| v * c).collect();
                    q.tensor = Tensor::new(q.tensor.shape().to_vec(), scaled).unwrap();
                }
                q
            }).collect::<Vec<Parameter<f64>>>();
            let scaled = Model::from_parameters(m.config().clone(), params).unwrap();
            let after = compute_mask(&scaled, p, PruneScope::PerLayer).unwrap();
            prop_assert_eq!(before.entry("blocks.0.attn.q.weight"), after.entry("blocks.0.attn.q.weight"));
        }

        #[test]
        fn metric_axioms(
            bits in prop::collection::vec((any::<bool>(), any::<bool>(), any::<bool>()), 1..64)
        ) {
            let a = single(&bits.iter().map(|t| t.0 as u8).collect::<Vec<_>>());
            let b = single(&bits.iter().map(|t| t.1 as u8).collect::<Vec<_>>());
            let c = single(&bits.iter().map(|t| t.2 as u8).collect::<Vec<_>>());
            let d = |x: &PruneMask, y: &PruneMask| mask_distance(x, y).unwrap().value();
            prop_assert_eq!(d(&a, &a), 0.0);
            prop_assert_eq!(d(&a, &b), d(&b, &a));
            let h = |x: &PruneMask, y: &PruneMask| hamming(x, y).unwrap();
            prop_assert!(h(&a, &c) <= h(&a, &b) + h(&b, &c));
            prop_assert!((0.0..=1.0).contains(&d(&a, &b)));
        }
    }
}
