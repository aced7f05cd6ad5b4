//! Adapters, reassembled models and the model group.
//!
//! A reassembled model `m_{i,j}` is the feature-extraction block of
//! prototype `i` joined to the device-adaptation block of prototype `j`
//! through a two-convolution adapter: a 1x1 conv on the ex side, a
//! deterministic spatial resize, and a 1x1 conv on the ad side. A group
//! `G_i` is the three members `{m_{i,S}, m_{i,M}, m_{i,L}}` sharing one
//! global copy of the ex-block weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::nn::params::ParameterSet;
use crate::nn::{GraphSpec, Layer, LayerSpec, ModelGraph, Segments, ShapeKind};
use crate::partition::PartitionResult;
use crate::zoo::{PrototypeModel, SizeLevel};

/// Spatial rule between the two adapter convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpatialRule {
    Identity,
    /// Adaptive average pool to the target extent.
    Pool { out_h: usize, out_w: usize },
}

/// Structural description of an adapter: `ex -> alpha0 -> resize -> alpha1 -> ad`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adapter {
    /// ex-block output feature shape (C, H, W).
    pub ex_out: (usize, usize, usize),
    /// ad-block input feature shape (C, H, W).
    pub ad_in: (usize, usize, usize),
    /// Mid-channel width of the two 1x1 convolutions.
    pub mid_ch: usize,
    pub spatial_rule: SpatialRule,
    /// Construction seed (weights are initialized deterministically).
    pub seed: u64,
}

impl Adapter {
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = vec![LayerSpec::Conv2d {
            in_ch: self.ex_out.0,
            out_ch: self.mid_ch,
            kernel: 1,
            stride: 1,
            pad: 0,
            groups: 1,
            bias: true,
        }];
        if let SpatialRule::Pool { out_h, out_w } = self.spatial_rule {
            specs.push(LayerSpec::AdaptiveAvgPool { out_h, out_w });
        }
        specs.push(LayerSpec::Conv2d {
            in_ch: self.mid_ch,
            out_ch: self.ad_in.0,
            kernel: 1,
            stride: 1,
            pad: 0,
            groups: 1,
            bias: true,
        });
        specs
    }

    pub fn param_count(&self) -> usize {
        let (ca, cm, cb) = (self.ex_out.0, self.mid_ch, self.ad_in.0);
        ca * cm + cm + cm * cb + cb
    }
}

/// Adapter mid width: geometric mean of the two channel counts, rounded up
/// to a multiple of 8 (min 8).
pub fn adapter_mid_channels(c_ex: usize, c_ad: usize) -> usize {
    let gm = ((c_ex * c_ad) as f64).sqrt();
    (((gm / 8.0).ceil() as usize) * 8).max(8)
}

/// Build the adapter descriptor for an ex-output shape feeding an ad-input
/// shape. Both must be spatial feature shapes.
pub fn make_adapter(
    ex_out: ShapeKind,
    ad_in: ShapeKind,
    seed: u64,
) -> Result<Adapter> {
    let (ec, eh, ew) = ex_out.spatial().ok_or_else(|| {
        Error::shape("make_adapter", format!("ex output not spatial: {ex_out:?}"))
    })?;
    let (ac, ah, aw) = ad_in.spatial().ok_or_else(|| {
        Error::shape("make_adapter", format!("ad input not spatial: {ad_in:?}"))
    })?;
    let spatial_rule = if (eh, ew) == (ah, aw) {
        SpatialRule::Identity
    } else {
        SpatialRule::Pool { out_h: ah, out_w: aw }
    };
    Ok(Adapter {
        ex_out: (ec, eh, ew),
        ad_in: (ac, ah, aw),
        mid_ch: adapter_mid_channels(ec, ac),
        spatial_rule,
        seed,
    })
}

/// One member `m_{i,j}` of a group: shared ex block + adapter + own ad block.
#[derive(Clone, Debug)]
pub struct ReassembledModel {
    /// (ex source zoo index, ad source zoo index)
    pub id: (usize, usize),
    pub level: SizeLevel,
    pub adapter: Adapter,
    pub graph: ModelGraph<f32>,
}

impl ReassembledModel {
    pub fn param_count(&self) -> usize {
        self.graph.param_count()
    }

    /// Human-readable id like `L-S` (ex-source level, ad-source level).
    pub fn label(&self, ex_level: SizeLevel) -> String {
        format!("{}-{}", ex_level.letter(), self.level.letter())
    }
}

/// Assemble one reassembled model from partitioned prototypes.
/// `ex_i` supplies layers `[..cut_i]`, `ad_j` supplies layers `[cut_j..]`.
pub fn reassemble(
    zoo: &[PrototypeModel],
    cuts: &[usize],
    ex_source: usize,
    ad_source: usize,
    seed: u64,
) -> Result<ReassembledModel> {
    if cuts.len() != zoo.len() {
        return Err(Error::InvalidConfig(format!(
            "partition covers {} models, zoo has {}",
            cuts.len(),
            zoo.len()
        )));
    }
    let ex_proto = &zoo[ex_source];
    let ad_proto = &zoo[ad_source];
    let (cut_ex, cut_ad) = (cuts[ex_source], cuts[ad_source]);
    if !ex_proto.cut_candidates.contains(&cut_ex) || !ad_proto.cut_candidates.contains(&cut_ad) {
        return Err(Error::InvalidConfig(
            "cut metadata missing: cuts must come from the prototypes' candidates".into(),
        ));
    }
    let ex_shapes = ex_proto.graph.boundary_shapes()?;
    let ad_shapes = ad_proto.graph.boundary_shapes()?;
    let adapter = make_adapter(ex_shapes[cut_ex], ad_shapes[cut_ad], seed)?;

    // layer specs: ex prefix + adapter + ad suffix
    let ex_specs: Vec<LayerSpec> =
        ex_proto.graph.layers[..cut_ex].iter().map(|l| l.spec()).collect();
    let adapter_specs = adapter.layer_specs();
    let ad_specs: Vec<LayerSpec> =
        ad_proto.graph.layers[cut_ad..].iter().map(|l| l.spec()).collect();

    let segments = Segments { ex_len: ex_specs.len(), adapter_len: adapter_specs.len() };
    let spec = GraphSpec {
        input_shape: ex_proto.graph.input_shape,
        num_classes: ad_proto.graph.num_classes,
        layers: ex_specs.into_iter().chain(adapter_specs).chain(ad_specs).collect(),
        segments: Some(segments),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graph = ModelGraph::from_spec(&spec, &mut rng)?;

    // copy the prototypes' weights into the ex and ad segments; the adapter
    // keeps its fresh init
    let mut src = ParameterSet::new();
    collect_block(&ex_proto.graph, 0, cut_ex, "ex", &mut src)?;
    collect_block(&ad_proto.graph, cut_ad, ad_proto.graph.layers.len(), "ad", &mut src)?;
    src.load_partial(&mut graph)?;

    Ok(ReassembledModel { id: (ex_source, ad_source), level: ad_proto.level, adapter, graph })
}

/// Copy `graph.layers[from..to]` parameters into `dst` under `segment.{i-from}.*`.
fn collect_block(
    graph: &ModelGraph<f32>,
    from: usize,
    to: usize,
    segment: &str,
    dst: &mut ParameterSet<f32>,
) -> Result<()> {
    for (i, layer) in graph.layers[from..to].iter().enumerate() {
        let prefix = format!("{segment}.{i}");
        let mut err = None;
        layer.visit_params(&prefix, &mut |p| {
            if err.is_some() {
                return;
            }
            if let Err(e) = dst.insert(crate::nn::params::ParamEntry {
                name: p.name,
                value: p.value.clone(),
                grad: None,
                kind: p.kind,
            }) {
                err = Some(e);
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
    }
    Ok(())
}

/// A group `G_i`: three reassembled members sharing the ex block of
/// prototype `ex_source`, plus the canonical global ex weights.
#[derive(Clone, Debug)]
pub struct ModelGroup {
    pub ex_source: usize,
    pub ex_level: SizeLevel,
    /// Canonical shared ex-block weights (`ex.*` names).
    pub ex_params: ParameterSet<f32>,
    /// Members ordered by ascending parameter count (S, M, L ad blocks).
    pub members: Vec<ReassembledModel>,
}

impl ModelGroup {
    pub fn member_label(&self, j: usize) -> String {
        self.members[j].label(self.ex_level)
    }

    /// Materialize member `j` with the current global weights loaded.
    pub fn materialize(&self, j: usize) -> Result<ModelGraph<f32>> {
        let mut g = self.members[j].graph.clone();
        self.ex_params.load_partial(&mut g)?;
        Ok(g)
    }

    /// Push the canonical ex weights into every member's stored graph.
    pub fn sync_ex(&mut self) -> Result<()> {
        for m in self.members.iter_mut() {
            self.ex_params.load_partial(&mut m.graph)?;
        }
        Ok(())
    }
}

/// Build `G_i`: reassemble every ad block onto the ex block of `ex_source`.
pub fn build_group(
    zoo: &[PrototypeModel],
    partition: &PartitionResult,
    ex_source: usize,
    seed: u64,
) -> Result<ModelGroup> {
    if partition.cuts.len() != zoo.len() {
        return Err(Error::InvalidConfig(format!(
            "partition covers {} models, zoo has {}",
            partition.cuts.len(),
            zoo.len()
        )));
    }
    let mut members = Vec::with_capacity(zoo.len());
    for j in 0..zoo.len() {
        members.push(reassemble(
            zoo,
            &partition.cuts,
            ex_source,
            j,
            derive_seed(seed, &[ex_source as u64, j as u64]),
        )?);
    }
    members.sort_by_key(|m| m.param_count());
    let mut group = ModelGroup {
        ex_source,
        ex_level: zoo[ex_source].level,
        ex_params: ParameterSet::from_model(&members[0].graph, false).subset("ex."),
        members,
    };
    group.sync_ex()?;
    Ok(group)
}

/// Serialize a group: one copy of the shared ex weights plus each member's
/// adapter+ad weights, with the structural specs in the metadata.
pub fn save_group(path: &std::path::Path, group: &ModelGroup) -> Result<()> {
    let mut params = ParameterSet::new();
    for e in group.ex_params.iter() {
        params.insert(e.clone())?;
    }
    for (j, m) in group.members.iter().enumerate() {
        let own = ParameterSet::from_model(&m.graph, false);
        for e in own.iter() {
            if e.name.starts_with("ex.") {
                continue;
            }
            let mut e = e.clone();
            e.name = format!("member{j}.{}", e.name);
            params.insert(e)?;
        }
    }
    let meta = serde_json::json!({
        "kind": "model_group",
        "ex_source": group.ex_source,
        "ex_level": group.ex_level,
        "members": group.members.iter().map(|m| serde_json::json!({
            "id": m.id,
            "level": m.level,
            "adapter": m.adapter,
            "graph": m.graph.spec(),
        })).collect::<Vec<_>>(),
    });
    write_checkpoint(path, &meta, &params)
}

pub fn load_group(path: &std::path::Path) -> Result<ModelGroup> {
    let Checkpoint { meta, params } = read_checkpoint::<f32>(path)?;
    if meta["kind"] != "model_group" {
        return Err(Error::Checkpoint(format!("expected a model_group checkpoint, got {}", meta["kind"])));
    }
    let ex_source = meta["ex_source"]
        .as_u64()
        .ok_or_else(|| Error::Checkpoint("missing ex_source".into()))? as usize;
    let ex_level: SizeLevel = serde_json::from_value(meta["ex_level"].clone())?;
    let members_meta = meta["members"]
        .as_array()
        .ok_or_else(|| Error::Checkpoint("missing members".into()))?;
    let mut members = Vec::with_capacity(members_meta.len());
    for (j, mm) in members_meta.iter().enumerate() {
        let id: (usize, usize) = serde_json::from_value(mm["id"].clone())?;
        let level: SizeLevel = serde_json::from_value(mm["level"].clone())?;
        let adapter: Adapter = serde_json::from_value(mm["adapter"].clone())?;
        let spec: GraphSpec = serde_json::from_value(mm["graph"].clone())?;
        // zero-init then load from the records
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut graph = ModelGraph::from_spec(&spec, &mut rng)?;
        let mut own = ParameterSet::new();
        let member_prefix = format!("member{j}.");
        for e in params.iter() {
            if let Some(stripped) = e.name.strip_prefix(&member_prefix) {
                let mut e = e.clone();
                e.name = stripped.to_string();
                own.insert(e)?;
            }
        }
        for e in params.with_prefix("ex.") {
            own.insert(e.clone())?;
        }
        own.load_into(&mut graph)?;
        members.push(ReassembledModel { id, level, adapter, graph });
    }
    let mut ex_params = ParameterSet::new();
    for e in params.with_prefix("ex.") {
        ex_params.insert(e.clone())?;
    }
    Ok(ModelGroup { ex_source, ex_level, ex_params, members })
}

/// Identity-initialize an adapter in place: both convolutions become
/// identity maps (requires equal channel widths and identity spatial rule).
pub fn identity_init_adapter(model: &mut ReassembledModel) -> Result<()> {
    let a = &model.adapter;
    if a.ex_out.0 != a.mid_ch || a.mid_ch != a.ad_in.0 || a.spatial_rule != SpatialRule::Identity {
        return Err(Error::InvalidConfig(format!(
            "identity adapter needs equal widths and identity resize, got {a:?}"
        )));
    }
    let seg = model.graph.segments.expect("reassembled models have segments");
    for idx in seg.ex_len..seg.ex_len + seg.adapter_len {
        if let Layer::Conv2d(c) = &mut model.graph.layers[idx] {
            c.weight.fill(0.0);
            let ch = c.in_ch;
            for o in 0..c.out_ch {
                // 1x1 kernel: weight[o][o][0][0] = 1
                c.weight.data_mut()[o * ch + o] = 1.0;
            }
            if let Some(b) = c.bias.as_mut() {
                b.fill(0.0);
            }
        }
    }
    Ok(())
}
