//! Forward evaluation with optional activation recording, and the matching
//! reverse pass.

use super::ops::{self, FeatureMap};
use super::{check_input, Conv, ModelParams, ProbabilityMap, ResidualBlock, SeParams, LOGIT_CLIP};
use crate::data::InputStack;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct SeTrace {
    squeeze: Vec<f64>,
    hidden: Vec<f64>,
    gate: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockTrace {
    a1: FeatureMap,
    a2: FeatureMap,
    /// Rectified residual sum, i.e. the SE input.
    pre_se: FeatureMap,
    se: SeTrace,
}

#[derive(Debug, Clone)]
struct TapTrace {
    tap: FeatureMap,
    ups: Vec<FeatureMap>,
}

/// Activations recorded by [`forward_traced`] for one input.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: FeatureMap,
    stem_out: FeatureMap,
    pool_arg: Vec<usize>,
    /// `acts[0]` is the pooled stem output, `acts[b + 1]` block `b`'s output.
    acts: Vec<FeatureMap>,
    blocks: Vec<BlockTrace>,
    taps: Vec<TapTrace>,
    concat: FeatureMap,
    logits: Vec<f64>,
    prob: Vec<f64>,
}

impl ForwardTrace {
    pub fn probabilities(&self) -> &[f64] {
        &self.prob
    }

    /// Upsampled tap outputs concatenated along channels, as fed to the head.
    pub fn tap_features(&self) -> &FeatureMap {
        &self.concat
    }
}

fn conv(c: &Conv, x: &FeatureMap) -> FeatureMap {
    ops::conv2d_forward(x, &c.weight.data, &c.bias.data, c.geom)
}

fn conv_relu(c: &Conv, x: &FeatureMap) -> FeatureMap {
    let mut y = conv(c, x);
    ops::relu_inplace(&mut y);
    y
}

pub(crate) fn se_forward(x: &FeatureMap, se: &SeParams) -> (FeatureMap, SeTrace) {
    let (c, hd) = (se.channels, se.hidden);
    let inv_n = 1.0 / x.plane_len() as f64;
    let squeeze: Vec<f64> = (0..c).map(|ch| x.plane(ch).iter().sum::<f64>() * inv_n).collect();
    let hidden: Vec<f64> = (0..hd)
        .map(|j| {
            let row = &se.reduce_weight.data[j * c..(j + 1) * c];
            let pre = se.reduce_bias.data[j] + row.iter().zip(&squeeze).map(|(w, z)| w * z).sum::<f64>();
            pre.max(0.0)
        })
        .collect();
    let gate: Vec<f64> = (0..c)
        .map(|ch| {
            let row = &se.expand_weight.data[ch * hd..(ch + 1) * hd];
            let pre = se.expand_bias.data[ch] + row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>();
            ops::sigmoid(pre)
        })
        .collect();
    let mut y = x.clone();
    for (ch, &s) in gate.iter().enumerate() {
        y.plane_mut(ch).iter_mut().for_each(|v| *v *= s);
    }
    (y, SeTrace { squeeze, hidden, gate })
}

fn se_backward(x: &FeatureMap, se: &SeParams, t: &SeTrace, dy: &FeatureMap, g: &mut SeParams) -> FeatureMap {
    let (c, hd) = (se.channels, se.hidden);
    let inv_n = 1.0 / x.plane_len() as f64;
    let dpre2: Vec<f64> = (0..c)
        .map(|ch| {
            let dgate: f64 = dy.plane(ch).iter().zip(x.plane(ch)).map(|(d, v)| d * v).sum();
            dgate * t.gate[ch] * (1.0 - t.gate[ch])
        })
        .collect();
    let mut dhidden = vec![0.0; hd];
    for ch in 0..c {
        g.expand_bias.data[ch] += dpre2[ch];
        for j in 0..hd {
            g.expand_weight.data[ch * hd + j] += dpre2[ch] * t.hidden[j];
            dhidden[j] += se.expand_weight.data[ch * hd + j] * dpre2[ch];
        }
    }
    let mut dsqueeze = vec![0.0; c];
    for j in 0..hd {
        let dpre1 = if t.hidden[j] > 0.0 { dhidden[j] } else { 0.0 };
        if dpre1 == 0.0 {
            continue;
        }
        g.reduce_bias.data[j] += dpre1;
        for ch in 0..c {
            g.reduce_weight.data[j * c + ch] += dpre1 * t.squeeze[ch];
            dsqueeze[ch] += se.reduce_weight.data[j * c + ch] * dpre1;
        }
    }
    let mut dx = dy.clone();
    for ch in 0..c {
        let (s, dz) = (t.gate[ch], dsqueeze[ch] * inv_n);
        for v in dx.plane_mut(ch) {
            *v = *v * s + dz;
        }
    }
    dx
}

fn block_forward(b: &ResidualBlock, x: &FeatureMap) -> (FeatureMap, BlockTrace) {
    let a1 = conv_relu(&b.reduce, x);
    let a2 = conv_relu(&b.spatial, &a1);
    let mut sum = conv(&b.expand, &a2);
    match &b.shortcut {
        Some(s) => sum.add_assign(&conv(s, x)),
        None => sum.add_assign(x),
    }
    ops::relu_inplace(&mut sum);
    let (out, se) = se_forward(&sum, &b.se);
    (
        out,
        BlockTrace {
            a1,
            a2,
            pre_se: sum,
            se,
        },
    )
}

fn conv_backward(c: &Conv, x: &FeatureMap, dy: &FeatureMap, g: &mut Conv, need_dx: bool) -> Option<FeatureMap> {
    ops::conv2d_backward(x, &c.weight.data, c.geom, dy, &mut g.weight.data, &mut g.bias.data, need_dx)
}

fn block_backward(b: &ResidualBlock, x: &FeatureMap, t: &BlockTrace, dout: &FeatureMap, g: &mut ResidualBlock) -> FeatureMap {
    let mut dsum = se_backward(&t.pre_se, &b.se, &t.se, dout, &mut g.se);
    ops::relu_backward_inplace(&mut dsum, &t.pre_se);
    let mut da2 = conv_backward(&b.expand, &t.a2, &dsum, &mut g.expand, true).expect("dx requested");
    ops::relu_backward_inplace(&mut da2, &t.a2);
    let mut da1 = conv_backward(&b.spatial, &t.a1, &da2, &mut g.spatial, true).expect("dx requested");
    ops::relu_backward_inplace(&mut da1, &t.a1);
    let mut dx = conv_backward(&b.reduce, x, &da1, &mut g.reduce, true).expect("dx requested");
    match (&b.shortcut, &mut g.shortcut) {
        (Some(s), Some(gs)) => dx.add_assign(&conv_backward(s, x, &dsum, gs, true).expect("dx requested")),
        _ => dx.add_assign(&dsum),
    }
    dx
}

/// Runs the upsampler chain; intermediate outputs are appended to `keep` when given.
pub(crate) fn upsample(tap: &FeatureMap, ups: &[Conv], mut keep: Option<&mut Vec<FeatureMap>>) -> FeatureMap {
    let mut cur = tap.clone();
    for (i, u) in ups.iter().enumerate() {
        let mut next = ops::conv_transpose2d_forward(&cur, &u.weight.data, &u.bias.data, u.geom);
        if i + 1 < ups.len() {
            ops::relu_inplace(&mut next);
        }
        if let Some(k) = keep.as_deref_mut() {
            k.push(next.clone());
        }
        cur = next;
    }
    cur
}

fn input_map(stack: &InputStack) -> FeatureMap {
    FeatureMap::from_vec(3, stack.height, stack.width, stack.channels.clone())
}

fn head_probabilities(model: &ModelParams, concat: &FeatureMap) -> (Vec<f64>, Vec<f64>) {
    let logits = conv(&model.head, concat).data;
    let prob = logits
        .iter()
        .map(|&z| ops::sigmoid(z.clamp(-LOGIT_CLIP, LOGIT_CLIP)))
        .collect();
    (logits, prob)
}

fn evaluate(model: &ModelParams, stack: &InputStack, record: bool) -> (Vec<f64>, Option<ForwardTrace>) {
    let input = input_map(stack);
    let stem_out = conv_relu(&model.stem, &input);
    let (pooled, pool_arg) = ops::maxpool_forward(&stem_out, 3, 2, 1);

    let k = model.config.tap_channels;
    let (h, w) = (stack.height, stack.width);
    let mut concat = FeatureMap::zeros(k * model.taps.len(), h, w);
    let mut acts = Vec::new();
    let mut blocks = Vec::new();
    let mut taps: Vec<Option<TapTrace>> = vec![None; model.taps.len()];

    let mut cur = pooled;
    for (bi, b) in model.blocks.iter().enumerate() {
        let (out, bt) = block_forward(b, &cur);
        if record {
            acts.push(std::mem::replace(&mut cur, out));
            blocks.push(bt);
        } else {
            cur = out;
        }
        for (ti, tap) in model.taps.iter().enumerate().filter(|(_, t)| t.block == bi) {
            let t = conv_relu(&tap.conv, &cur);
            let mut ups = Vec::new();
            let full = upsample(&t, &tap.upsamplers, record.then_some(&mut ups));
            debug_assert_eq!((full.height, full.width), (h, w));
            concat.data[ti * k * h * w..(ti + 1) * k * h * w].copy_from_slice(&full.data);
            if record {
                taps[ti] = Some(TapTrace { tap: t, ups });
            }
        }
    }
    let (logits, prob) = head_probabilities(model, &concat);
    if !record {
        return (prob, None);
    }
    acts.push(cur);
    let trace = ForwardTrace {
        input,
        stem_out,
        pool_arg,
        acts,
        blocks,
        taps: taps.into_iter().map(|t| t.expect("every tap evaluated")).collect(),
        concat,
        logits,
        prob: prob.clone(),
    };
    (prob, Some(trace))
}

pub(crate) fn run(model: &ModelParams, stack: &InputStack) -> Vec<f64> {
    evaluate(model, stack, false).0
}

/// Forward pass that also records every activation needed by [`backward`].
pub fn forward_traced(model: &ModelParams, stack: &InputStack) -> Result<(ProbabilityMap, ForwardTrace)> {
    check_input(model, stack)?;
    let (values, trace) = evaluate(model, stack, true);
    Ok((
        ProbabilityMap {
            height: stack.height,
            width: stack.width,
            values,
            exam_id: stack.exam_id.clone(),
            slice_index: stack.center_index,
        },
        trace.expect("recorded"),
    ))
}

/// Accumulates into `grads` the parameter gradient of a scalar loss whose
/// gradient with respect to the output probabilities is `dprob`.
pub fn backward(model: &ModelParams, trace: &ForwardTrace, dprob: &[f64], grads: &mut ModelParams) -> Result<()> {
    if dprob.len() != trace.prob.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for a {}-pixel output",
            dprob.len(),
            trace.prob.len()
        )));
    }
    let (h, w) = (trace.input.height, trace.input.width);
    let dlogits: Vec<f64> = dprob
        .iter()
        .zip(&trace.prob)
        .zip(&trace.logits)
        .map(|((&d, &p), &z)| if z.abs() > LOGIT_CLIP { 0.0 } else { d * p * (1.0 - p) })
        .collect();
    let dlogits = FeatureMap::from_vec(1, h, w, dlogits);
    let dconcat = conv_backward(&model.head, &trace.concat, &dlogits, &mut grads.head, true).expect("dx requested");

    let k = model.config.tap_channels;
    let mut dacts: Vec<Option<FeatureMap>> = vec![None; trace.acts.len()];
    for (ti, (tap, tt)) in model.taps.iter().zip(&trace.taps).enumerate() {
        let gt = &mut grads.taps[ti];
        let mut d = FeatureMap::from_vec(k, h, w, dconcat.data[ti * k * h * w..(ti + 1) * k * h * w].to_vec());
        for ui in (0..tap.upsamplers.len()).rev() {
            if ui + 1 < tap.upsamplers.len() {
                ops::relu_backward_inplace(&mut d, &tt.ups[ui]);
            }
            let x = if ui == 0 { &tt.tap } else { &tt.ups[ui - 1] };
            let u = &tap.upsamplers[ui];
            let gu = &mut gt.upsamplers[ui];
            d = ops::conv_transpose2d_backward(x, &u.weight.data, u.geom, &d, &mut gu.weight.data, &mut gu.bias.data, true)
                .expect("dx requested");
        }
        ops::relu_backward_inplace(&mut d, &tt.tap);
        let src = &trace.acts[tap.block + 1];
        let dsrc = conv_backward(&tap.conv, src, &d, &mut gt.conv, true).expect("dx requested");
        match &mut dacts[tap.block + 1] {
            Some(acc) => acc.add_assign(&dsrc),
            slot => *slot = Some(dsrc),
        }
    }

    let mut carry: Option<FeatureMap> = None;
    for bi in (0..model.blocks.len()).rev() {
        let dout = match (carry.take(), dacts[bi + 1].take()) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                a
            }
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => FeatureMap::zeros(
                trace.acts[bi + 1].channels,
                trace.acts[bi + 1].height,
                trace.acts[bi + 1].width,
            ),
        };
        carry = Some(block_backward(
            &model.blocks[bi],
            &trace.acts[bi],
            &trace.blocks[bi],
            &dout,
            &mut grads.blocks[bi],
        ));
    }

    let dpooled = carry.expect("at least one residual block");
    let s = &trace.stem_out;
    let mut dstem = ops::maxpool_backward(&dpooled, &trace.pool_arg, (s.channels, s.height, s.width));
    ops::relu_backward_inplace(&mut dstem, s);
    conv_backward(&model.stem, &trace.input, &dstem, &mut grads.stem, false);
    Ok(())
}
