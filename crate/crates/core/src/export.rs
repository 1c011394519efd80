//! Removal of masked-out channels and parameter / MAC accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arch::{Generator, GeneratorConfig, GeneratorKind};
use crate::error::{Error, Result};
use crate::nn::{ClassInput, Init};
use crate::tensor::{Real, Tensor};
use crate::train::GenModel;

/// Configuration of the exported generator: every block's 3×3 widths set to
/// the surviving channel counts.
pub fn pruned_config(gen: &Generator, mask_names: &[String]) -> Result<GeneratorConfig> {
    if gen.cfg.kind != GeneratorKind::Student {
        return Err(Error::Config("only a masked student can be exported".into()));
    }
    let unfrozen: Vec<&str> = gen
        .masks()
        .zip(mask_names)
        .filter(|(m, _)| !m.is_frozen())
        .map(|(_, n)| n.as_str())
        .collect();
    if !unfrozen.is_empty() {
        return Err(Error::BinarizationIncomplete(unfrozen.join(", ")));
    }
    let mut cfg = gen.cfg.clone();
    cfg.kind = GeneratorKind::Pruned;
    for (spec, block) in cfg.blocks.iter_mut().zip(&gen.blocks) {
        let (Some(m1), Some(m2)) = (&block.mask1, &block.mask2) else {
            return Err(Error::Config("student block without masks".into()));
        };
        spec.conv1_out = Some(m1.active_channels()?.len());
        spec.conv2_out = Some(m2.active_channels()?.len());
    }
    Ok(cfg)
}

/// Builds the pruned generator: conv1 filters, cbn2 channels and conv2 input
/// slices go where mask1 is zero; conv2 filters and transition input slices
/// go where mask2 is zero. Mask layers are dropped.
pub fn strip_and_rewire<T: Real>(student: &GenModel<T>) -> Result<GenModel<T>> {
    let names: Vec<String> = student
        .arch
        .masks()
        .map(|m| student.store.name(m.w).to_string())
        .collect();
    let cfg = pruned_config(&student.arch, &names)?;
    let mut out = GenModel::<T>::build(&cfg)?;

    let mut slices: BTreeMap<String, Vec<(usize, Vec<usize>)>> = BTreeMap::new();
    for (k, block) in student.arch.blocks.iter().enumerate() {
        let keep1 = block
            .mask1
            .as_ref()
            .map(|m| m.active_channels())
            .transpose()?
            .unwrap_or_default();
        let keep2 = block
            .mask2
            .as_ref()
            .map(|m| m.active_channels())
            .transpose()?
            .unwrap_or_default();
        let p = format!("g.block{k}");
        let mut put = |suffix: &str, cuts: Vec<(usize, Vec<usize>)>| {
            slices.insert(format!("{p}.{suffix}"), cuts);
        };
        put("conv1.weight", vec![(0, keep1.clone())]);
        put("conv1.bias", vec![(0, keep1.clone())]);
        put("cbn2.gamma", vec![(1, keep1.clone())]);
        put("cbn2.beta", vec![(1, keep1.clone())]);
        put("cbn2.running_mean", vec![(0, keep1.clone())]);
        put("cbn2.running_var", vec![(0, keep1.clone())]);
        put("conv2.weight", vec![(0, keep2.clone()), (1, keep1)]);
        put("conv2.bias", vec![(0, keep2.clone())]);
        put("transition.weight", vec![(1, keep2)]);
    }

    let targets: Vec<_> = out.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in targets {
        let src = student
            .store
            .id(&name)
            .ok_or_else(|| Error::MissingTensor(name.clone()))?;
        let mut value = student.store.value(src).clone();
        for (axis, keep) in slices.get(&name).into_iter().flatten() {
            value = value.select(*axis, keep)?;
        }
        if value.shape() != out.store.value(id).shape() {
            return Err(Error::Malformed(format!(
                "rewired `{name}` has shape {:?}, expected {:?}",
                value.shape(),
                out.store.value(id).shape()
            )));
        }
        out.store.set(id, value);
    }
    Ok(out)
}

/// Seeded `(z, cls)` trial inputs for comparing two generators.
pub fn trial_inputs<T: Real>(cfg: &GeneratorConfig, trials: usize, seed: u64) -> (Tensor<T>, ClassInput<T>) {
    let z = Init::new(seed).normal(&[trials, cfg.z_dim], 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0c1a_55e5);
    let labels = (0..trials).map(|_| rng.random_range(0..cfg.num_classes)).collect();
    (z, ClassInput::Labels(labels))
}

/// Eval-mode max |masked − pruned| over `trials` seeded inputs.
pub fn equivalence_check<T: Real>(
    masked: &mut GenModel<T>,
    pruned: &mut GenModel<T>,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    const CHUNK: usize = 25;
    let (z, cls) = trial_inputs::<T>(&masked.arch.cfg, trials, seed);
    let ClassInput::Labels(labels) = cls else {
        unreachable!()
    };
    let mut worst = 0.0f64;
    for start in (0..trials).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(trials)).collect();
        let zc = z.select(0, &idx)?;
        let cc = ClassInput::Labels(idx.iter().map(|&i| labels[i]).collect());
        let a = masked.generate(&zc, &cc)?;
        let b = pruned.generate(&zc, &cc)?;
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "equivalence_check",
                format!("outputs differ in shape: {:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let d = a.max_abs_diff(&b)?.to_f64().unwrap_or(f64::INFINITY);
        worst = if d.is_nan() { f64::INFINITY } else { worst.max(d) };
    }
    Ok(worst)
}

/// Parameters of a `k×k` convolution with bias.
pub fn conv_params(k: usize, cin: usize, cout: usize) -> u64 {
    (k * k * cin * cout + cout) as u64
}

/// Per-sample MACs of a same-padded `k×k` convolution with an `h×w` output.
pub fn conv_macs(k: usize, cin: usize, cout: usize, h: usize, w: usize) -> Result<u64> {
    if h == 0 || w == 0 {
        return Err(Error::shape("count_macs", format!("zero spatial size {h}×{w}")));
    }
    Ok((k * k * cin * cout * h * w) as u64)
}

pub fn linear_params(inp: usize, out: usize) -> u64 {
    (inp * out + out) as u64
}

pub fn linear_macs(inp: usize, out: usize) -> u64 {
    (inp * out) as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Stem,
    Norm,
    Conv1,
    Conv2,
    Mask,
    Transition,
    Skip,
    Attention,
    Output,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Stem => "stem",
            Role::Norm => "norm",
            Role::Conv1 => "conv1",
            Role::Conv2 => "conv2",
            Role::Mask => "mask",
            Role::Transition => "transition",
            Role::Skip => "skip",
            Role::Attention => "attention",
            Role::Output => "output",
        }
    }
}

/// Formula-derived size of one layer; MACs are per generated sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCount {
    pub name: String,
    pub role: Role,
    pub params: u64,
    pub macs: u64,
    pub channels: usize,
}

/// Enumerates every generator layer with its parameter and MAC count.
/// Normalization and mask layers contribute parameters but no MACs.
pub fn count_layers(gen: &Generator) -> Result<Vec<LayerCount>> {
    let cfg = &gen.cfg;
    let k = cfg.num_classes;
    let mut rows = Vec::new();
    let mut row = |name: String, role, params, macs, channels| {
        rows.push(LayerCount {
            name,
            role,
            params,
            macs,
            channels,
        })
    };
    let s0 = cfg.stem_size();
    let stem_out = cfg.stem_channels() * s0 * s0;
    row(
        "g.stem".into(),
        Role::Stem,
        linear_params(cfg.z_dim, stem_out),
        linear_macs(cfg.z_dim, stem_out),
        stem_out,
    );
    for (i, block) in gen.blocks.iter().enumerate() {
        let s = cfg.block_size(i);
        let spec = &block.spec;
        let (c1, c2) = (block.conv1.out_ch, block.conv2.out_ch);
        let p = format!("g.block{i}");
        row(
            format!("{p}.cbn1"),
            Role::Norm,
            (2 * k * spec.in_ch) as u64,
            0,
            spec.in_ch,
        );
        row(
            format!("{p}.conv1"),
            Role::Conv1,
            conv_params(3, spec.in_ch, c1),
            conv_macs(3, spec.in_ch, c1, s, s)?,
            c1,
        );
        row(format!("{p}.cbn2"), Role::Norm, (2 * k * c1) as u64, 0, c1);
        if let Some(m) = &block.mask1 {
            row(format!("{p}.mask1"), Role::Mask, m.n as u64, 0, m.n);
        }
        row(
            format!("{p}.conv2"),
            Role::Conv2,
            conv_params(3, c1, c2),
            conv_macs(3, c1, c2, s, s)?,
            c2,
        );
        if let Some(m) = &block.mask2 {
            row(format!("{p}.mask2"), Role::Mask, m.n as u64, 0, m.n);
        }
        if let Some(t) = &block.transition {
            let (ci, co) = (t.conv.in_ch, t.conv.out_ch);
            row(
                format!("{p}.transition"),
                Role::Transition,
                conv_params(1, ci, co),
                conv_macs(1, ci, co, s, s)?,
                co,
            );
        }
        let (ci, co) = (block.skip.in_ch, block.skip.out_ch);
        row(
            format!("{p}.skip"),
            Role::Skip,
            conv_params(1, ci, co),
            conv_macs(1, ci, co, s, s)?,
            co,
        );
        if cfg.attention_after == Some(i) {
            if let Some(a) = &gen.attention {
                row(
                    "g.attn".into(),
                    Role::Attention,
                    a.param_count() as u64,
                    a.macs(s, s),
                    a.channels,
                );
            }
        }
    }
    let (c, s) = (cfg.final_channels(), cfg.image_size);
    row("g.out_bn".into(), Role::Norm, (2 * c) as u64, 0, c);
    row(
        "g.out_conv".into(),
        Role::Output,
        conv_params(3, c, 3),
        conv_macs(3, c, 3, s, s)?,
        3,
    );
    Ok(rows)
}

pub fn count_params(gen: &Generator) -> Result<u64> {
    Ok(count_layers(gen)?.iter().map(|r| r.params).sum())
}

pub fn count_macs(gen: &Generator) -> Result<u64> {
    Ok(count_layers(gen)?.iter().map(|r| r.macs).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub name: String,
    pub role: Role,
    pub params_before: u64,
    pub params_after: u64,
    pub macs_before: u64,
    pub macs_after: u64,
    pub channels_before: usize,
    pub channels_after: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Totals {
    pub params_before: u64,
    pub params_after: u64,
    pub macs_before: u64,
    pub macs_after: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PruneReport {
    pub rows: Vec<ReportRow>,
    pub totals: Totals,
}

fn ratio(before: u64, after: u64) -> f64 {
    if after == 0 {
        f64::INFINITY
    } else {
        before as f64 / after as f64
    }
}

impl PruneReport {
    /// Pairs the student's layers with the pruned model's by name; layers
    /// absent after export (the masks) count as zero.
    pub fn new(student: &Generator, pruned: &Generator) -> Result<Self> {
        let after: BTreeMap<String, LayerCount> =
            count_layers(pruned)?.into_iter().map(|r| (r.name.clone(), r)).collect();
        let before = count_layers(student)?;
        for name in after.keys() {
            if !before.iter().any(|b| &b.name == name) {
                return Err(Error::Malformed(format!("pruned layer `{name}` has no counterpart")));
            }
        }
        let rows: Vec<ReportRow> = before
            .into_iter()
            .map(|b| {
                let a = after.get(&b.name);
                ReportRow {
                    params_after: a.map_or(0, |a| a.params),
                    macs_after: a.map_or(0, |a| a.macs),
                    channels_after: a.map_or(0, |a| a.channels),
                    name: b.name,
                    role: b.role,
                    params_before: b.params,
                    macs_before: b.macs,
                    channels_before: b.channels,
                }
            })
            .collect();
        let totals = rows.iter().fold(Totals::default(), |t, r| Totals {
            params_before: t.params_before + r.params_before,
            params_after: t.params_after + r.params_after,
            macs_before: t.macs_before + r.macs_before,
            macs_after: t.macs_after + r.macs_after,
        });
        Ok(Self { rows, totals })
    }

    pub fn param_factor(&self) -> f64 {
        ratio(self.totals.params_before, self.totals.params_after)
    }

    pub fn mac_factor(&self) -> f64 {
        ratio(self.totals.macs_before, self.totals.macs_after)
    }

    fn sum(&self, roles: &[Role], after: bool) -> u64 {
        self.rows
            .iter()
            .filter(|r| roles.contains(&r.role))
            .map(|r| if after { r.params_after } else { r.params_before })
            .sum()
    }

    /// Shrinkage of the 3×3 convolutions with the retained transition and
    /// skip layers charged to the pruned side:
    /// `1 − (conv1′ + conv2′ + transition + skip) / (conv1 + conv2)`.
    pub fn net_prunable_reduction(&self) -> f64 {
        let before = self.sum(&[Role::Conv1, Role::Conv2], false);
        let after = self.sum(&[Role::Conv1, Role::Conv2, Role::Transition, Role::Skip], true);
        1.0 - after as f64 / before as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "name,role,params_before,params_after,macs_before,macs_after,channels_before,channels_after\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.name,
                r.role.as_str(),
                r.params_before,
                r.params_after,
                r.macs_before,
                r.macs_after,
                r.channels_before,
                r.channels_after
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            s,
            "total,,{},{},{},{},,",
            t.params_before, t.params_after, t.macs_before, t.macs_after
        );
        s
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<22} {:>10} {:>10} {:>12} {:>12} {:>9}\n",
            "layer", "params", "pruned", "MACs", "pruned", "channels"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<22} {:>10} {:>10} {:>12} {:>12} {:>4}→{:<4}",
                r.name,
                r.params_before,
                r.params_after,
                r.macs_before,
                r.macs_after,
                r.channels_before,
                r.channels_after
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            s,
            "{:<22} {:>10} {:>10} {:>12} {:>12}",
            "total", t.params_before, t.params_after, t.macs_before, t.macs_after
        );
        let _ = writeln!(
            s,
            "params ×{:.2}  MACs ×{:.2}  prunable conv reduction {:.1}%",
            self.param_factor(),
            self.mac_factor(),
            100.0 * self.net_prunable_reduction()
        );
        s
    }
}
