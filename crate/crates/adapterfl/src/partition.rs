//! Partition search: choose each prototype's feature-extraction /
//! device-adaptation boundary by maximizing summed representation
//! similarity against an anchor block.
//!
//! For an anchor `(a, f_a)` the per-model term decouples:
//!
//! ```text
//! term_i(f_i) = S(B_i^0, B_an^0) + S(B_i^1, B_an^1)
//!             = [cka(act_i(f_i), act_a(f_a)) + cka(x, x)]
//!             + [cka(logits_i, logits_a) + cka(act_i(f_i), act_a(f_a))]
//! ```
//!
//! so for a fixed anchor every other model picks its best cut
//! independently, which makes the anchor loop exact without enumerating
//! joint cut vectors. Scores are computed from cached centered Grams
//! (`O(n^2 d)` once per boundary, `O(n^2)` per pair).

use serde::Serialize;

use crate::cka::{cka_from_grams, CenteredGram};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::zoo::PrototypeModel;

/// Probe capture settings.
#[derive(Clone, Copy, Debug)]
pub struct ProbeOptions {
    /// Optional sketch width applied to flattened activations wider than
    /// this before the Gram is formed. `None` keeps exact features.
    pub feature_cap: Option<usize>,
    /// Seed for the sketch matrices (shared across equal widths).
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions { feature_cap: None, seed: 0 }
    }
}

/// Cached per-model probe representations.
pub struct ModelFeatures {
    /// One centered Gram per cut candidate, in candidate order.
    pub cut_grams: Vec<CenteredGram>,
    pub logits_gram: CenteredGram,
    pub cut_candidates: Vec<usize>,
}

/// Everything the search needs, detached from the models.
pub struct ProbeFeatures {
    pub per_model: Vec<ModelFeatures>,
    pub input_gram: CenteredGram,
    pub samples: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct PairEntry {
    pub model_a: usize,
    pub cut_a: usize,
    pub model_b: usize,
    pub cut_b: usize,
    pub cka: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PartitionResult {
    pub anchor_model: usize,
    pub anchor_cut: usize,
    /// Chosen boundary per zoo index.
    pub cuts: Vec<usize>,
    pub objective: f64,
    pub pair_table: Vec<PairEntry>,
}

fn gram_of(t: &Tensor<f32>, opt: &ProbeOptions) -> CenteredGram {
    let n = t.shape()[0];
    let d = t.numel() / n;
    match opt.feature_cap {
        Some(cap) if d > cap => {
            let projected = crate::cka::project_rows_f32(t.data(), n, d, cap, opt.seed);
            CenteredGram::from_rows_f32(&projected, n, cap)
        }
        _ => CenteredGram::from_rows_f32(t.data(), n, d),
    }
}

/// Run the probe batch through every prototype, caching a centered Gram at
/// each cut candidate plus the logits. Models run in eval mode.
pub fn capture_features(
    zoo: &mut [PrototypeModel],
    probe: &Tensor<f32>,
    opt: &ProbeOptions,
) -> Result<ProbeFeatures> {
    let samples = probe.shape()[0];
    if samples < 2 {
        return Err(Error::InvalidConfig(format!("probe needs >= 2 samples, got {samples}")));
    }
    let mut per_model = Vec::with_capacity(zoo.len());
    for m in zoo.iter_mut() {
        if m.cut_candidates.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "model {} has no cut candidates",
                m.arch.name()
            )));
        }
        let mut cut_grams = Vec::with_capacity(m.cut_candidates.len());
        let boundaries = m.cut_candidates.clone();
        let logits = m.graph.forward_scan(probe, &boundaries, &mut |_, act| {
            cut_grams.push(gram_of(act, opt));
        })?;
        if !logits.is_finite() {
            return Err(Error::NonFinite(format!("probe logits of {}", m.arch.name())));
        }
        per_model.push(ModelFeatures {
            cut_grams,
            logits_gram: gram_of(&logits, opt),
            cut_candidates: boundaries,
        });
    }
    Ok(ProbeFeatures { per_model, input_gram: gram_of(probe, opt), samples })
}

impl ProbeFeatures {
    fn act_cka(&self, i: usize, fi_idx: usize, j: usize, fj_idx: usize) -> f64 {
        cka_from_grams(&self.per_model[i].cut_grams[fi_idx], &self.per_model[j].cut_grams[fj_idx])
            .value
    }

    fn logits_cka(&self, i: usize, j: usize) -> f64 {
        cka_from_grams(&self.per_model[i].logits_gram, &self.per_model[j].logits_gram).value
    }

    fn input_self(&self) -> f64 {
        cka_from_grams(&self.input_gram, &self.input_gram).value
    }

    /// Objective of Eq-style summed similarity at a full assignment:
    /// anchor `(a, f_a present in cuts[a])` and one cut per model.
    pub fn objective(&self, anchor_model: usize, cuts: &[usize]) -> f64 {
        let a = anchor_model;
        let fa_idx = self.cut_index(a, cuts[a]);
        let s_in = self.input_self();
        let mut total = 0.0;
        for (i, &fi) in cuts.iter().enumerate() {
            let fi_idx = self.cut_index(i, fi);
            let act = self.act_cka(i, fi_idx, a, fa_idx);
            total += 2.0 * act + s_in + self.logits_cka(i, a);
        }
        total
    }

    fn cut_index(&self, model: usize, cut: usize) -> usize {
        self.per_model[model]
            .cut_candidates
            .iter()
            .position(|&c| c == cut)
            .expect("cut must be one of the model's candidates")
    }
}

/// Exhaustive-over-anchors search; per-model cuts decouple given the
/// anchor. Ties break toward the smallest cut index, then the smallest
/// model id for anchors.
pub fn partition_search(zoo: &mut [PrototypeModel], probe: &Tensor<f32>) -> Result<PartitionResult> {
    partition_search_with(zoo, probe, &ProbeOptions::default())
}

pub fn partition_search_with(
    zoo: &mut [PrototypeModel],
    probe: &Tensor<f32>,
    opt: &ProbeOptions,
) -> Result<PartitionResult> {
    if zoo.len() < 2 {
        return Err(Error::InvalidConfig(format!("need >= 2 models, got {}", zoo.len())));
    }
    let features = capture_features(zoo, probe, opt)?;
    let result = search_features(&features);
    Ok(result)
}

/// The search proper, on pre-captured features.
pub fn search_features(features: &ProbeFeatures) -> PartitionResult {
    let n_models = features.per_model.len();
    let s_in = features.input_self();

    // anchor candidates ordered by (cut, model) for deterministic ties
    let mut anchors: Vec<(usize, usize)> = Vec::new();
    for (a, mf) in features.per_model.iter().enumerate() {
        for &fa in &mf.cut_candidates {
            anchors.push((fa, a));
        }
    }
    anchors.sort();

    let mut best: Option<(f64, usize, usize, Vec<usize>)> = None;
    for &(fa, a) in &anchors {
        let fa_idx = features.cut_index(a, fa);
        let mut cuts = vec![0usize; n_models];
        let mut total = 0.0;
        for i in 0..n_models {
            if i == a {
                cuts[i] = fa;
                let act = features.act_cka(a, fa_idx, a, fa_idx);
                total += 2.0 * act + s_in + features.logits_cka(a, a);
                continue;
            }
            let logits = features.logits_cka(i, a);
            let mut best_cut = None::<(f64, usize)>;
            for (fi_idx, &fi) in features.per_model[i].cut_candidates.iter().enumerate() {
                let term = 2.0 * features.act_cka(i, fi_idx, a, fa_idx) + s_in + logits;
                // strictly-greater keeps the smallest cut on ties
                if best_cut.map_or(true, |(t, _)| term > t) {
                    best_cut = Some((term, fi));
                }
            }
            let (term, fi) = best_cut.expect("cut candidates are nonempty");
            cuts[i] = fi;
            total += term;
        }
        if best.as_ref().is_none_or(|(t, ..)| total > *t) {
            best = Some((total, a, fa, cuts));
        }
    }
    let (objective, anchor_model, anchor_cut, cuts) = best.expect("at least one anchor");

    let mut pair_table = Vec::new();
    for i in 0..n_models {
        for j in (i + 1)..n_models {
            for (fi_idx, &fi) in features.per_model[i].cut_candidates.iter().enumerate() {
                for (fj_idx, &fj) in features.per_model[j].cut_candidates.iter().enumerate() {
                    pair_table.push(PairEntry {
                        model_a: i,
                        cut_a: fi,
                        model_b: j,
                        cut_b: fj,
                        cka: features.act_cka(i, fi_idx, j, fj_idx),
                    });
                }
            }
        }
    }
    PartitionResult { anchor_model, anchor_cut, cuts, objective, pair_table }
}
