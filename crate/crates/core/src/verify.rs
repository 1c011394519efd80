//! Finite-difference checks of every differentiable operation and layer.

use crate::arch::{BlockSpec, GeneratorConfig, ResBlock};
use crate::autodiff::{grad_check, GradCheckReport, StandardizeOver, Tape, Var};
use crate::error::Result;
use crate::nn::{
    projection_logit, ClassInput, CondBatchNorm, Conv2d, Ctx, Init, Linear, Mode, ParamStore, SelfAttention,
    SpectralNorm,
};
use crate::objectives::{adv_loss_d, adv_loss_g, attention_map, distill_loss, AdvLoss, ClassCondNorm};
use crate::pruning::{MaskConfig, TransitionLayer};
use crate::tensor::Tensor;

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

type Loss = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Reduces any node to a scalar through fixed random weights, so every
/// output element carries a distinct gradient.
fn readout(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let r = Init::new(seed ^ 0x5eed).normal(tape.shape(v), 1.0);
    let r = tape.constant(r);
    let p = tape.mul(v, r)?;
    tape.sum(p)
}

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    loss: Loss,
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    loss: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        inputs,
        loss: Box::new(loss),
    }
}

/// A case whose parameters live in a store: every stored tensor (buffers
/// included) followed by `inputs` becomes a checked leaf.
fn module_case<M: 'static>(
    name: &'static str,
    build: impl FnOnce(&mut ParamStore<f64>, &mut Init) -> Result<M>,
    inputs: Vec<Tensor<f64>>,
    seed: u64,
    forward: impl Fn(&M, &mut Ctx<f64>, &[Var]) -> Result<Var> + 'static,
) -> Result<Case> {
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let module = build(&mut store, &mut init)?;
    let n = store.len();
    let mut all: Vec<Tensor<f64>> = store.iter().map(|(_, p)| p.value.clone()).collect();
    all.extend(inputs);
    Ok(case(name, all, move |tape, vars| {
        let mut store = store.clone();
        let (pv, iv) = vars.split_at(n);
        let mut cx = Ctx::new(tape, &mut store, pv, Mode::Train);
        cx.update_stats = false;
        let out = forward(&module, &mut cx, iv)?;
        readout(tape, out, seed)
    }))
}

fn op_cases(seed: u64) -> Result<Vec<Case>> {
    let mut init = Init::new(seed);
    let mut rnd = |shape: &[usize]| -> Tensor<f64> { init.normal(shape, 1.0) };
    let pos = |t: Tensor<f64>| t.map(|v| v.abs() + 0.5);
    let s = seed;
    let mut v = vec![
        case("add", vec![rnd(&[2, 3]), rnd(&[2, 3])], move |t, x| {
            let y = t.add(x[0], x[1])?;
            readout(t, y, s)
        }),
        case(
            "add_broadcast",
            vec![rnd(&[2, 3, 2, 2]), rnd(&[1, 3, 1, 1])],
            move |t, x| {
                let y = t.add(x[0], x[1])?;
                readout(t, y, s)
            },
        ),
        case("sub", vec![rnd(&[4]), rnd(&[4])], move |t, x| {
            let y = t.sub(x[0], x[1])?;
            readout(t, y, s)
        }),
        case("mul", vec![rnd(&[2, 4]), rnd(&[2, 4])], move |t, x| {
            let y = t.mul(x[0], x[1])?;
            readout(t, y, s)
        }),
        case("div", vec![rnd(&[2, 4]), pos(rnd(&[2, 4]))], move |t, x| {
            let y = t.div(x[0], x[1])?;
            readout(t, y, s)
        }),
        case("scale", vec![rnd(&[5])], move |t, x| {
            let y = t.scale(x[0], -1.7)?;
            readout(t, y, s)
        }),
        case("offset", vec![rnd(&[5])], move |t, x| {
            let y = t.offset(x[0], 0.3)?;
            let y = t.square(y)?;
            readout(t, y, s)
        }),
        case("relu", vec![rnd(&[8])], move |t, x| {
            let y = t.relu(x[0])?;
            readout(t, y, s)
        }),
        case("sigmoid", vec![rnd(&[8])], move |t, x| {
            let y = t.sigmoid(x[0])?;
            readout(t, y, s)
        }),
        case("tanh", vec![rnd(&[8])], move |t, x| {
            let y = t.tanh(x[0])?;
            readout(t, y, s)
        }),
        case("abs", vec![rnd(&[8])], move |t, x| {
            let y = t.abs(x[0])?;
            readout(t, y, s)
        }),
        case("square", vec![rnd(&[8])], move |t, x| {
            let y = t.square(x[0])?;
            readout(t, y, s)
        }),
        case("sqrt", vec![pos(rnd(&[8]))], move |t, x| {
            let y = t.sqrt(x[0])?;
            readout(t, y, s)
        }),
        case("ln_clamp_min", vec![pos(rnd(&[8]))], move |t, x| {
            let y = t.ln_clamp_min(x[0], 1e-12)?;
            readout(t, y, s)
        }),
        case("clamp_min", vec![pos(rnd(&[8]))], move |t, x| {
            let y = t.clamp_min(x[0], 0.2)?;
            readout(t, y, s)
        }),
        case("sum", vec![rnd(&[2, 3])], move |t, x| {
            let y = t.sum(x[0])?;
            t.square(y)
        }),
        case("mean", vec![rnd(&[2, 3])], move |t, x| {
            let y = t.mean(x[0])?;
            t.square(y)
        }),
        case("sum_axes", vec![rnd(&[2, 3, 4])], move |t, x| {
            let y = t.sum_axes(x[0], &[0, 2])?;
            readout(t, y, s)
        }),
        case("softmax", vec![rnd(&[3, 5])], move |t, x| {
            let y = t.softmax(x[0], 1)?;
            readout(t, y, s)
        }),
        case("l2_norm", vec![rnd(&[3, 4])], move |t, x| {
            let y = t.l2_norm(x[0], 1)?;
            readout(t, y, s)
        }),
        case("l2_normalize", vec![rnd(&[3, 4])], move |t, x| {
            let y = t.l2_normalize(x[0], 1, 1e-12)?;
            readout(t, y, s)
        }),
        case("matmul", vec![rnd(&[3, 4]), rnd(&[4, 2])], move |t, x| {
            let y = t.matmul(x[0], x[1])?;
            readout(t, y, s)
        }),
        case("transpose", vec![rnd(&[3, 4])], move |t, x| {
            let y = t.transpose(x[0])?;
            readout(t, y, s)
        }),
        case("reshape", vec![rnd(&[2, 6])], move |t, x| {
            let y = t.reshape(x[0], &[3, 4])?;
            readout(t, y, s)
        }),
        case("upsample2x", vec![rnd(&[1, 2, 3, 3])], move |t, x| {
            let y = t.upsample2x(x[0])?;
            readout(t, y, s)
        }),
        case("avgpool2", vec![rnd(&[1, 2, 4, 4])], move |t, x| {
            let y = t.avgpool2(x[0])?;
            readout(t, y, s)
        }),
        case(
            "conv2d_3x3",
            vec![rnd(&[2, 3, 5, 5]), rnd(&[4, 3, 3, 3]), rnd(&[4])],
            move |t, x| {
                let y = t.conv2d(x[0], x[1], Some(x[2]), 1, 1)?;
                readout(t, y, s)
            },
        ),
        case(
            "conv2d_strided",
            vec![rnd(&[1, 2, 6, 6]), rnd(&[3, 2, 3, 3])],
            move |t, x| {
                let y = t.conv2d(x[0], x[1], None, 2, 0)?;
                readout(t, y, s)
            },
        ),
        case("standardize_batch", vec![rnd(&[3, 2, 2, 2])], move |t, x| {
            let (y, _) = t.standardize(x[0], StandardizeOver::BatchAndSpace, 1e-5)?;
            readout(t, y, s)
        }),
        case("standardize_space", vec![rnd(&[2, 2, 3, 3])], move |t, x| {
            let (y, _) = t.standardize(x[0], StandardizeOver::Space, 1e-5)?;
            readout(t, y, s)
        }),
        case("gather_rows", vec![rnd(&[4, 3])], move |t, x| {
            let y = t.gather_rows(x[0], &[2, 0, 2])?;
            readout(t, y, s)
        }),
        case("attention_map", vec![rnd(&[2, 3, 2, 2])], move |t, x| {
            let y = attention_map(t, x[0])?;
            readout(t, y, s)
        }),
        case(
            "distill_loss",
            vec![rnd(&[2, 3, 2, 2]), rnd(&[2, 3, 2, 2])],
            move |t, x| {
                let ft = attention_map(t, x[0])?;
                let fs = attention_map(t, x[1])?;
                distill_loss(t, ft, fs)
            },
        ),
        case(
            "projection_logit",
            vec![rnd(&[3, 4]), rnd(&[4]), rnd(&[3, 4])],
            move |t, x| {
                let y = projection_logit(t, x[0], x[1], x[2])?;
                readout(t, y, s)
            },
        ),
    ];
    for kind in [AdvLoss::NonSaturating, AdvLoss::Saturating, AdvLoss::Hinge] {
        v.push(case(
            match kind {
                AdvLoss::NonSaturating => "adv_non_saturating",
                AdvLoss::Saturating => "adv_saturating",
                AdvLoss::Hinge => "adv_hinge",
            },
            vec![rnd(&[4]), rnd(&[4])],
            move |t, x| {
                let d = adv_loss_d(t, x[0], x[1], kind)?;
                let g = adv_loss_g(t, x[1], kind)?;
                let g = t.scale(g, 0.5)?;
                t.add(d, g)
            },
        ));
    }

    let labels = ClassInput::Labels(vec![2, 0]);
    let l = labels.clone();
    v.push(module_case(
        "linear",
        |st, init| Linear::new(st, init, "lin", 5, 3),
        vec![rnd(&[2, 5])],
        s,
        |m, cx, x| m.forward(cx, x[0]),
    )?);
    v.push(module_case(
        "conv2d_layer",
        |st, init| Conv2d::new(st, init, "c", 2, 3, 3),
        vec![rnd(&[2, 2, 4, 4])],
        s,
        |m, cx, x| m.forward(cx, x[0]),
    )?);
    v.push(module_case(
        "cond_batch_norm",
        |st, _| CondBatchNorm::new(st, "cbn", 3, 3),
        vec![rnd(&[2, 3, 2, 2])],
        s,
        move |m, cx, x| m.forward(cx, x[0], &l),
    )?);
    let mix = ClassInput::Mixture(Tensor::from_f64([2, 3], &[0.2, 0.8, 0.0, 0.5, 0.25, 0.25])?);
    v.push(module_case(
        "class_embedding_mixture",
        |st, _| CondBatchNorm::new(st, "cbn", 2, 3),
        vec![rnd(&[2, 2, 2, 2])],
        s,
        move |m, cx, x| m.forward(cx, x[0], &mix),
    )?);
    v.push(module_case(
        "self_attention",
        |st, init| {
            let a = SelfAttention::new(st, init, "attn", 8)?;
            st.set(a.gamma, Tensor::scalar(0.7));
            Ok(a)
        },
        vec![rnd(&[1, 8, 2, 2])],
        s,
        |m, cx, x| m.forward(cx, x[0]),
    )?);
    v.push(module_case(
        "spectral_norm",
        |st, init| {
            let conv = Conv2d::new(st, init, "sn", 3, 4, 3)?;
            let sn = SpectralNorm::new(st, init, conv.weight)?;
            sn.update(st)?;
            Ok((conv, sn))
        },
        vec![rnd(&[1, 3, 3, 3])],
        s,
        |(conv, sn), cx, x| {
            let w = sn.normalized(cx)?;
            conv.forward_with_weight(cx, x[0], w)
        },
    )?);
    let l = labels.clone();
    v.push(module_case(
        "class_cond_norm",
        |st, _| ClassCondNorm::new(st, &[3], 3),
        vec![rnd(&[2, 3, 2, 2])],
        s,
        move |m, cx, x| m.forward(cx, 0, x[0], &l),
    )?);
    v.push(module_case(
        "transition",
        |st, init| TransitionLayer::new(st, init, "tr", 3, 4),
        vec![rnd(&[1, 3, 2, 2])],
        s,
        |m, cx, x| m.forward(cx, x[0]),
    )?);
    v.push(pp_res_case(s, rnd(&[2, 4, 4, 4]), labels)?);
    Ok(v)
}

/// Full student block: conditional norms, upsampling, both masks with
/// open gates, transition and skip.
fn pp_res_case(seed: u64, x: Tensor<f64>, labels: ClassInput<f64>) -> Result<Case> {
    let mut cfg = GeneratorConfig::toy(4, 3, 4, 16);
    cfg.mask = MaskConfig::default();
    let spec = BlockSpec::new(4, 4, true);
    module_case(
        "pp_res_block",
        move |st, init| {
            let block = ResBlock::new(st, init, "blk", &spec, &cfg)?;
            let mut jitter = Init::new(seed ^ 0x3a5c);
            for m in block.masks() {
                let w = jitter.normal::<f64>(&[m.n], 0.004).map(|v| v + 0.01);
                st.set(m.w, w);
            }
            Ok(block)
        },
        vec![x],
        seed,
        move |m, cx, x| {
            let out = m.forward(cx, x[0], &labels)?;
            let reg: Vec<Var> = m.masks().map(|mask| mask.regularizer(cx)).collect::<Result<_>>()?;
            let r = readout(cx.tape, out, seed)?;
            reg.into_iter().try_fold(r, |acc, v| cx.tape.add(acc, v))
        },
    )
}

/// Runs every case at the given step and tolerance.
pub fn gradcheck_suite(seed: u64, h: f64, tol: f64) -> Result<Vec<OpCheck>> {
    op_cases(seed)?
        .into_iter()
        .map(|c| {
            Ok(OpCheck {
                name: c.name,
                report: grad_check(&*c.loss, &c.inputs, h, tol)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let checks = gradcheck_suite(11, GRADCHECK_STEP, GRADCHECK_TOL).unwrap();
        let failed: Vec<_> = checks
            .iter()
            .filter(|c| !c.report.passed())
            .map(|c| (c.name, c.report.worst()))
            .collect();
        assert!(failed.is_empty(), "{failed:?}");
        assert!(checks.iter().any(|c| c.name == "pp_res_block"));
    }
}
