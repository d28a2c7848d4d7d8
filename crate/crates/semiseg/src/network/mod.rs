//! Segmentation backbone: a V-Net-style volumetric encoder-decoder.
//!
//! Two 3x3x3 conv+ReLU blocks per resolution level, strided 2x2x2 convs down,
//! transposed 2x2x2 convs up, additive skip connections, dropout at the
//! bottleneck, and a pointwise head with channel softmax. The layer inventory
//! is deliberately lean so the tiny variant (width 4, two levels) trains on a
//! CPU in minutes; the full variant (width 16, four levels) follows the same
//! topology.
//!
//! Parameters live in a single flat [`ParamVector`] whose layout is a pure
//! function of [`BackboneConfig`], so two instances built from the same
//! config agree on length and ordering.

mod layers;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::grid::numel;
use crate::rng::standard_normal;
use crate::volumes::Volume;

pub use layers::softmax_channels;

/// Size configuration for the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    /// Number of resolution levels (level 0 is full resolution).
    pub depth: usize,
    pub dropout_rate: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl BackboneConfig {
    pub fn full() -> Self {
        BackboneConfig {
            in_channels: 1,
            num_classes: 2,
            base_width: 16,
            depth: 4,
            dropout_rate: 0.5,
        }
    }

    pub fn tiny() -> Self {
        BackboneConfig {
            in_channels: 1,
            num_classes: 2,
            base_width: 4,
            depth: 2,
            dropout_rate: 0.5,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels != 1 {
            return Err(SegError::InvalidBackbone(
                "only single-channel input volumes are supported".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(SegError::InvalidBackbone("num_classes must be >= 2".into()));
        }
        if self.base_width == 0 || self.depth == 0 {
            return Err(SegError::InvalidBackbone(
                "base_width and depth must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(SegError::InvalidBackbone(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Input spatial dims must be divisible by this.
    pub fn shape_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Per-voxel class probabilities, channel-major `[c][z][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub num_classes: usize,
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl ProbMap {
    pub fn uniform(num_classes: usize, shape: [usize; 3]) -> Self {
        ProbMap {
            num_classes,
            shape,
            data: vec![1.0 / num_classes as f64; num_classes * numel(shape)],
        }
    }

    pub fn vol(&self) -> usize {
        numel(self.shape)
    }

    /// Slice of one class channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let v = self.vol();
        &self.data[c * v..(c + 1) * v]
    }

    /// Foreground channel (class 1) by crate convention.
    pub fn foreground(&self) -> &[f64] {
        self.channel(1)
    }

    /// Check the probability invariants: values in [0,1], voxel sums == 1
    /// within 1e-5.
    pub fn validate(&self) -> Result<()> {
        let v = self.vol();
        for &p in &self.data {
            if !(0.0..=1.0).contains(&p) {
                return Err(SegError::InvalidBackbone(format!(
                    "probability {p} outside [0,1]"
                )));
            }
        }
        for i in 0..v {
            let s: f64 = (0..self.num_classes).map(|c| self.data[c * v + i]).sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(SegError::InvalidBackbone(format!(
                    "voxel {i} probabilities sum to {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Ordered flat view of all trainable weights of one backbone instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Whether a forward pass samples dropout.
pub enum ForwardMode<'a> {
    Deterministic,
    Stochastic(&'a mut ChaCha8Rng),
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Conv3 { cin: usize, cout: usize },
    Down { cin: usize, cout: usize },
    Up { cin: usize, cout: usize },
    Conv1 { cin: usize, cout: usize },
}

impl Op {
    fn w_len(&self) -> usize {
        match *self {
            Op::Conv3 { cin, cout } => cout * cin * 27,
            Op::Down { cin, cout } | Op::Up { cin, cout } => cin * cout * 8,
            Op::Conv1 { cin, cout } => cout * cin,
        }
    }

    fn b_len(&self) -> usize {
        match *self {
            Op::Conv3 { cout, .. }
            | Op::Down { cout, .. }
            | Op::Up { cout, .. }
            | Op::Conv1 { cout, .. } => cout,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Op::Conv3 { cin, .. } => cin * 27,
            Op::Down { cin, .. } | Op::Up { cin, .. } => cin * 8,
            Op::Conv1 { cin, .. } => cin,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    op: Op,
    w_off: usize,
    b_off: usize,
}

/// The encoder-decoder network. Holds the layer layout, not the weights;
/// weights travel separately as [`ParamVector`]s so student and teacher can
/// share one instance.
#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    enc: Vec<[Slot; 2]>,
    down: Vec<Slot>,
    up: Vec<Slot>,
    dec: Vec<[Slot; 2]>,
    head: Slot,
    param_len: usize,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut cursor = 0usize;
        let mut slot = |op: Op| -> Slot {
            let w_off = cursor;
            let b_off = w_off + op.w_len();
            cursor = b_off + op.b_len();
            Slot { op, w_off, b_off }
        };
        let d = cfg.depth;
        let mut enc = Vec::with_capacity(d);
        let mut down = Vec::with_capacity(d.saturating_sub(1));
        for l in 0..d {
            let cin = if l == 0 { cfg.in_channels } else { cfg.width(l) };
            let w = cfg.width(l);
            enc.push([
                slot(Op::Conv3 { cin, cout: w }),
                slot(Op::Conv3 { cin: w, cout: w }),
            ]);
            if l + 1 < d {
                down.push(slot(Op::Down {
                    cin: w,
                    cout: cfg.width(l + 1),
                }));
            }
        }
        let mut up = Vec::with_capacity(d.saturating_sub(1));
        let mut dec = Vec::with_capacity(d.saturating_sub(1));
        for l in (0..d.saturating_sub(1)).rev() {
            let w = cfg.width(l);
            up.push(slot(Op::Up {
                cin: cfg.width(l + 1),
                cout: w,
            }));
            dec.push([
                slot(Op::Conv3 { cin: w, cout: w }),
                slot(Op::Conv3 { cin: w, cout: w }),
            ]);
        }
        let head = slot(Op::Conv1 {
            cin: cfg.base_width,
            cout: cfg.num_classes,
        });
        Ok(Backbone {
            cfg,
            enc,
            down,
            up,
            dec,
            head,
            param_len: cursor,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.param_len
    }

    /// He-normal weight init, zero biases.
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> ParamVector {
        let mut p = ParamVector::zeros(self.param_len);
        for slot in self.all_slots() {
            let std = (2.0 / slot.op.fan_in() as f64).sqrt();
            for i in 0..slot.op.w_len() {
                p.0[slot.w_off + i] = std * standard_normal(rng);
            }
        }
        p
    }

    fn all_slots(&self) -> Vec<Slot> {
        let mut v = Vec::new();
        for (l, blk) in self.enc.iter().enumerate() {
            v.extend_from_slice(blk);
            if l < self.down.len() {
                v.push(self.down[l]);
            }
        }
        for (i, s) in self.up.iter().enumerate() {
            v.push(*s);
            v.extend_from_slice(&self.dec[i]);
        }
        v.push(self.head);
        v
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_len {
            return Err(SegError::ParamLayoutMismatch {
                expected: self.param_len,
                got: params.len(),
            });
        }
        Ok(())
    }

    fn check_shape(&self, shape: [usize; 3]) -> Result<()> {
        let div = self.cfg.shape_divisor();
        if shape.iter().any(|&s| s == 0 || s % div != 0) {
            return Err(SegError::PatchNotDivisible {
                got: shape,
                divisor: div,
            });
        }
        Ok(())
    }

    /// Run the network and return per-voxel class probabilities. The output
    /// spatial shape equals the input shape. Deterministic unless a
    /// stochastic mode with an RNG is given (dropout at the bottleneck).
    pub fn forward(
        &self,
        params: &ParamVector,
        patch: &Volume,
        mode: ForwardMode,
    ) -> Result<ProbMap> {
        Ok(self.forward_cached(params, patch, mode)?.0)
    }

    /// Like [`Backbone::forward`] but also returns the activation cache
    /// needed by [`Backbone::backward`].
    pub fn forward_cached(
        &self,
        params: &ParamVector,
        patch: &Volume,
        mut mode: ForwardMode,
    ) -> Result<(ProbMap, ForwardCache)> {
        self.check_params(params)?;
        self.check_shape(patch.shape)?;
        let p = params.as_slice();
        let shape0 = patch.shape;
        let vol0 = numel(shape0);
        let input: Vec<f64> = patch.data.iter().map(|&v| v as f64).collect();

        let mut cache = ForwardCache {
            shape: shape0,
            ..ForwardCache::default()
        };
        let mut x = input.clone();
        cache.input = input;
        let mut shape = shape0;

        // encoder
        for l in 0..self.cfg.depth {
            for s in &self.enc[l] {
                x = self.apply(p, *s, &x, shape);
                layers::relu_inplace(&mut x);
                cache.acts.push(x.clone());
            }
            if l + 1 == self.cfg.depth {
                if let ForwardMode::Stochastic(rng) = &mut mode {
                    let rate = self.cfg.dropout_rate;
                    if rate > 0.0 {
                        let keep = 1.0 - rate;
                        let mask: Vec<f64> = (0..x.len())
                            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep })
                            .collect();
                        for (v, m) in x.iter_mut().zip(mask.iter()) {
                            *v *= m;
                        }
                        cache.dropout = Some(mask);
                    }
                }
                cache.bottleneck = x.clone();
            } else {
                cache.skips.push(x.clone());
                x = self.apply(p, self.down[l], &x, shape);
                layers::relu_inplace(&mut x);
                cache.acts.push(x.clone());
                shape = [shape[0] / 2, shape[1] / 2, shape[2] / 2];
            }
        }

        // decoder
        for (i, upslot) in self.up.iter().enumerate() {
            x = self.apply(p, *upslot, &x, shape);
            layers::relu_inplace(&mut x);
            shape = [shape[0] * 2, shape[1] * 2, shape[2] * 2];
            cache.acts.push(x.clone());
            let skip = &cache.skips[self.up.len() - 1 - i];
            for (a, s) in x.iter_mut().zip(skip.iter()) {
                *a += s;
            }
            for s in &self.dec[i] {
                x = self.apply(p, *s, &x, shape);
                layers::relu_inplace(&mut x);
                cache.acts.push(x.clone());
            }
        }
        debug_assert_eq!(shape, shape0);

        let c = self.cfg.num_classes;
        let mut logits = vec![0.0; c * vol0];
        let Op::Conv1 { cin, cout } = self.head.op else {
            unreachable!()
        };
        layers::conv1_forward(
            &x,
            cin,
            &mut logits,
            cout,
            vol0,
            &p[self.head.w_off..self.head.w_off + self.head.op.w_len()],
            &p[self.head.b_off..self.head.b_off + self.head.op.b_len()],
        );
        let mut probs = vec![0.0; c * vol0];
        layers::softmax_channels(&logits, c, vol0, &mut probs);
        Ok((
            ProbMap {
                num_classes: c,
                shape: shape0,
                data: probs,
            },
            cache,
        ))
    }

    fn apply(&self, p: &[f64], slot: Slot, x: &[f64], shape: [usize; 3]) -> Vec<f64> {
        let w = &p[slot.w_off..slot.w_off + slot.op.w_len()];
        let b = &p[slot.b_off..slot.b_off + slot.op.b_len()];
        match slot.op {
            Op::Conv3 { cin, cout } => {
                let mut out = vec![0.0; cout * numel(shape)];
                layers::conv3_forward(x, cin, &mut out, cout, shape, w, b);
                out
            }
            Op::Down { cin, cout } => {
                let half = [shape[0] / 2, shape[1] / 2, shape[2] / 2];
                let mut out = vec![0.0; cout * numel(half)];
                layers::down2_forward(x, cin, &mut out, cout, shape, w, b);
                out
            }
            Op::Up { cin, cout } => {
                let dbl = [shape[0] * 2, shape[1] * 2, shape[2] * 2];
                let mut out = vec![0.0; cout * numel(dbl)];
                layers::up2_forward(x, cin, &mut out, cout, shape, w, b);
                out
            }
            Op::Conv1 { cin, cout } => {
                let mut out = vec![0.0; cout * numel(shape)];
                layers::conv1_forward(x, cin, &mut out, cout, numel(shape), w, b);
                out
            }
        }
    }

    /// Backpropagate `dL/dprobs` through a cached forward pass, returning the
    /// gradient with respect to the parameters.
    pub fn backward(
        &self,
        params: &ParamVector,
        probs: &ProbMap,
        cache: &ForwardCache,
        grad_probs: &[f64],
    ) -> Result<ParamVector> {
        self.check_params(params)?;
        let p = params.as_slice();
        let mut grads = ParamVector::zeros(self.param_len);
        let shape0 = cache.shape;
        let vol0 = numel(shape0);
        let c = self.cfg.num_classes;

        let mut glogits = vec![0.0; c * vol0];
        layers::softmax_backward(&probs.data, grad_probs, c, vol0, &mut glogits);

        // `acts` replays in reverse exactly as pushed during the forward pass
        let mut act_idx = cache.acts.len();

        // head
        let last_dec = &cache.acts[act_idx - 1];
        let mut gx = vec![0.0; last_dec.len()];
        {
            let Op::Conv1 { cin, cout } = self.head.op else {
                unreachable!()
            };
            let (gw, gb) = grad_slices(grads.as_mut_slice(), self.head);
            layers::conv1_backward(
                last_dec,
                cin,
                &glogits,
                cout,
                vol0,
                &p[self.head.w_off..self.head.w_off + self.head.op.w_len()],
                gw,
                gb,
                &mut gx,
            );
        }

        let mut shape = shape0;
        // skip-branch gradients, indexed by encoder level
        let mut gskips: Vec<Option<Vec<f64>>> = vec![None; self.cfg.depth.saturating_sub(1)];

        // decoder in reverse: dec blocks bottom of the list were applied last
        for i in (0..self.up.len()).rev() {
            for s in self.dec[i].iter().rev() {
                let out_act = &cache.acts[act_idx - 1];
                act_idx -= 1;
                layers::relu_backward_inplace(&mut gx, out_act);
                // input of dec conv2 is dec conv1 output; input of dec conv1
                // is up output + skip, which was not stored separately: the
                // conv input for conv1 is (up activation + skip), reconstruct
                let inp_owned: Vec<f64>;
                let inp: &[f64] = if std::ptr::eq(s, &self.dec[i][1]) {
                    &cache.acts[act_idx - 1]
                } else {
                    let up_act = &cache.acts[act_idx - 1];
                    let skip = &cache.skips[self.up.len() - 1 - i];
                    inp_owned = up_act.iter().zip(skip.iter()).map(|(a, b)| a + b).collect();
                    &inp_owned
                };
                let Op::Conv3 { cin, cout } = s.op else {
                    unreachable!()
                };
                let mut ginp = vec![0.0; cin * numel(shape)];
                let (gw, gb) = grad_slices(grads.as_mut_slice(), *s);
                layers::conv3_backward(
                    inp,
                    cin,
                    &gx,
                    cout,
                    shape,
                    &p[s.w_off..s.w_off + s.op.w_len()],
                    gw,
                    gb,
                    &mut ginp,
                );
                gx = ginp;
            }
            // additive skip: the same gradient reaches the skip branch
            let level = self.up.len() - 1 - i;
            gskips[level] = Some(gx.clone());
            // up conv
            let up_act = &cache.acts[act_idx - 1];
            act_idx -= 1;
            layers::relu_backward_inplace(&mut gx, up_act);
            let half = [shape[0] / 2, shape[1] / 2, shape[2] / 2];
            let inp: &[f64] = if i == 0 {
                &cache.bottleneck
            } else {
                &cache.acts[act_idx - 1]
            };
            let s = self.up[i];
            let Op::Up { cin, cout } = s.op else {
                unreachable!()
            };
            let mut ginp = vec![0.0; cin * numel(half)];
            let (gw, gb) = grad_slices(grads.as_mut_slice(), s);
            layers::up2_backward(
                inp,
                cin,
                &gx,
                cout,
                half,
                &p[s.w_off..s.w_off + s.op.w_len()],
                gw,
                gb,
                &mut ginp,
            );
            gx = ginp;
            shape = half;
        }

        // bottleneck dropout backward
        if let Some(mask) = &cache.dropout {
            for (gv, m) in gx.iter_mut().zip(mask.iter()) {
                *gv *= m;
            }
        }

        // encoder in reverse
        for l in (0..self.cfg.depth).rev() {
            if l + 1 < self.cfg.depth {
                let down_act = &cache.acts[act_idx - 1];
                act_idx -= 1;
                layers::relu_backward_inplace(&mut gx, down_act);
                let s = self.down[l];
                let Op::Down { cin, cout } = s.op else {
                    unreachable!()
                };
                let full = [shape[0] * 2, shape[1] * 2, shape[2] * 2];
                let inp = &cache.skips[l];
                let mut ginp = vec![0.0; cin * numel(full)];
                let (gw, gb) = grad_slices(grads.as_mut_slice(), s);
                layers::down2_backward(
                    inp,
                    cin,
                    &gx,
                    cout,
                    full,
                    &p[s.w_off..s.w_off + s.op.w_len()],
                    gw,
                    gb,
                    &mut ginp,
                );
                gx = ginp;
                shape = full;
                if let Some(gs) = &gskips[l] {
                    for (a, b) in gx.iter_mut().zip(gs.iter()) {
                        *a += b;
                    }
                }
            }
            for (si, s) in self.enc[l].iter().enumerate().rev() {
                let out_act = &cache.acts[act_idx - 1];
                act_idx -= 1;
                layers::relu_backward_inplace(&mut gx, out_act);
                let inp: &[f64] = if l == 0 && si == 0 {
                    &cache.input
                } else {
                    &cache.acts[act_idx - 1]
                };
                let Op::Conv3 { cin, cout } = s.op else {
                    unreachable!()
                };
                let mut ginp = vec![0.0; cin * numel(shape)];
                let (gw, gb) = grad_slices(grads.as_mut_slice(), *s);
                layers::conv3_backward(
                    inp,
                    cin,
                    &gx,
                    cout,
                    shape,
                    &p[s.w_off..s.w_off + s.op.w_len()],
                    gw,
                    gb,
                    &mut ginp,
                );
                gx = ginp;
            }
        }
        debug_assert_eq!(act_idx, 0);
        Ok(grads)
    }
}

/// Split the flat gradient buffer into one slot's weight and bias views.
fn grad_slices(g: &mut [f64], slot: Slot) -> (&mut [f64], &mut [f64]) {
    let (_, rest) = g.split_at_mut(slot.w_off);
    let (gw, rest) = rest.split_at_mut(slot.op.w_len());
    let (gb, _) = rest.split_at_mut(slot.op.b_len());
    (gw, gb)
}

/// Activations captured during a forward pass, consumed by the backward pass.
#[derive(Debug, Default)]
pub struct ForwardCache {
    input: Vec<f64>,
    acts: Vec<Vec<f64>>,
    skips: Vec<Vec<f64>>,
    bottleneck: Vec<f64>,
    dropout: Option<Vec<f64>>,
    shape: [usize; 3],
}

/// Add clipped Gaussian noise to a patch: `out = in + clamp(n, -clip, clip)`,
/// `n ~ N(0, sigma^2)` elementwise. `sigma = 0` returns the input unchanged.
pub fn perturb_input(patch: &Volume, rng: &mut ChaCha8Rng, sigma: f64, clip: f64) -> Volume {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    if sigma == 0.0 {
        return patch.clone();
    }
    let mut out = patch.clone();
    for v in out.data.iter_mut() {
        let n = (sigma * standard_normal(rng)).clamp(-clip, clip);
        *v += n as f32;
    }
    out
}
