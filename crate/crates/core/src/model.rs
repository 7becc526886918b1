//! Multi-label network with multi-scale ROI-pooled feature fusion.
//!
//! Each stage is conv3x3 + ReLU + 2x max-pool. Configured stages are
//! ROI-pooled to a fixed grid (the lesion box for early stages, the whole
//! patch for late ones), passed through per-scale FC layers, concatenated,
//! and mapped to K independent sigmoid scores. Forward and backward are
//! exact, so gradients check against finite differences.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::{loss_gradient, multilabel_loss, ClassWeights, LossConfig};
use crate::ontology::LabelVector;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("roi [{x0}, {y0}, {x1}, {y1}] lies outside the {w}x{h} feature map")]
    RoiOutsideMap {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        w: usize,
        h: usize,
    },
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Rect {
        Rect { x0, y0, x1, y1 }
    }

    pub fn from_array(b: [f64; 4]) -> Rect {
        Rect::new(b[0], b[1], b[2], b[3])
    }

    fn scaled(&self, f: f64) -> Rect {
        Rect::new(self.x0 * f, self.y0 * f, self.x1 * f, self.y1 * f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub n_stages: usize,
    /// Output channels per stage.
    pub channels: Vec<usize>,
    pub in_channels: usize,
    pub roi_grid: (usize, usize),
    /// Width of each per-scale FC layer.
    pub fc_dim: usize,
    pub n_labels: usize,
    /// 1-based stages pooled over the lesion bounding box.
    pub bbox_roi_stages: Vec<usize>,
    /// 1-based stages pooled over the entire patch.
    pub patch_roi_stages: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            n_stages: 5,
            channels: vec![8, 16, 32, 48, 64],
            in_channels: 3,
            roi_grid: (5, 5),
            fc_dim: 64,
            n_labels: 1,
            bbox_roi_stages: vec![1, 2, 3],
            patch_roi_stages: vec![4, 5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RoiKind {
    Bbox,
    Whole,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_stages < 2 {
            return Err(ModelError::Config(format!(
                "need at least 2 stages, got {}",
                self.n_stages
            )));
        }
        if self.channels.len() != self.n_stages {
            return Err(ModelError::Config(format!(
                "channels has {} entries for {} stages",
                self.channels.len(),
                self.n_stages
            )));
        }
        if self.channels.iter().any(|&c| c == 0) || self.in_channels == 0 {
            return Err(ModelError::Config("channel counts must be positive".into()));
        }
        if self.roi_grid.0 == 0 || self.roi_grid.1 == 0 {
            return Err(ModelError::Config("roi grid must be positive".into()));
        }
        if self.n_labels == 0 {
            return Err(ModelError::Config("need at least one label".into()));
        }
        if self.fc_dim == 0 {
            return Err(ModelError::Config("fc_dim must be positive".into()));
        }
        for &s in self.bbox_roi_stages.iter().chain(&self.patch_roi_stages) {
            if s == 0 || s > self.n_stages {
                return Err(ModelError::Config(format!(
                    "roi stage {s} outside 1..={}",
                    self.n_stages
                )));
            }
        }
        let mut seen = vec![false; self.n_stages];
        for &s in self.bbox_roi_stages.iter().chain(&self.patch_roi_stages) {
            if seen[s - 1] {
                return Err(ModelError::Config(format!("stage {s} pooled twice")));
            }
            seen[s - 1] = true;
        }
        if !seen.iter().any(|&s| s) {
            return Err(ModelError::Config("no stage is pooled".into()));
        }
        Ok(())
    }

    /// Pooled stages in ascending order with their ROI kind (0-based).
    fn fused_stages(&self) -> Vec<(usize, RoiKind)> {
        let mut out: Vec<(usize, RoiKind)> = self
            .bbox_roi_stages
            .iter()
            .map(|&s| (s - 1, RoiKind::Bbox))
            .chain(self.patch_roi_stages.iter().map(|&s| (s - 1, RoiKind::Whole)))
            .collect();
        out.sort_by_key(|&(s, _)| s);
        out
    }

    fn fc_input_dim(&self, stage: usize) -> usize {
        self.channels[stage] * self.roi_grid.0 * self.roi_grid.1
    }

    fn concat_dim(&self) -> usize {
        self.fc_dim * self.fused_stages().len()
    }
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub conv_w: Vec<Array4<f64>>,
    pub conv_b: Vec<Array1<f64>>,
    pub fc_w: Vec<Array2<f64>>,
    pub fc_b: Vec<Array1<f64>>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

impl Parameters {
    /// He-style uniform initialization from a seeded generator; biases zero.
    pub fn init(cfg: &NetworkConfig, seed: u64) -> Parameters {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut uniform = |shape_fan_in: usize, n: usize| -> Vec<f64> {
            let limit = (6.0 / shape_fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
        };

        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let mut c_in = cfg.in_channels;
        for &c_out in &cfg.channels {
            let fan_in = c_in * 9;
            conv_w.push(
                Array4::from_shape_vec((c_out, c_in, 3, 3), uniform(fan_in, c_out * c_in * 9))
                    .expect("consistent shape"),
            );
            conv_b.push(Array1::zeros(c_out));
            c_in = c_out;
        }

        let mut fc_w = Vec::new();
        let mut fc_b = Vec::new();
        for (stage, _) in cfg.fused_stages() {
            let d_in = cfg.fc_input_dim(stage);
            fc_w.push(
                Array2::from_shape_vec((cfg.fc_dim, d_in), uniform(d_in, cfg.fc_dim * d_in))
                    .expect("consistent shape"),
            );
            fc_b.push(Array1::zeros(cfg.fc_dim));
        }

        let d_in = cfg.concat_dim();
        let out_w = Array2::from_shape_vec((cfg.n_labels, d_in), uniform(d_in, cfg.n_labels * d_in))
            .expect("consistent shape");
        let out_b = Array1::zeros(cfg.n_labels);

        Parameters {
            conv_w,
            conv_b,
            fc_w,
            fc_b,
            out_w,
            out_b,
        }
    }

    pub fn zeros(cfg: &NetworkConfig) -> Parameters {
        let mut p = Parameters::init(cfg, 0);
        p.scale(0.0);
        p
    }

    pub fn scale(&mut self, f: f64) {
        for t in self.conv_w.iter_mut() {
            t.mapv_inplace(|v| v * f);
        }
        for t in self.conv_b.iter_mut() {
            t.mapv_inplace(|v| v * f);
        }
        for t in self.fc_w.iter_mut() {
            t.mapv_inplace(|v| v * f);
        }
        for t in self.fc_b.iter_mut() {
            t.mapv_inplace(|v| v * f);
        }
        self.out_w.mapv_inplace(|v| v * f);
        self.out_b.mapv_inplace(|v| v * f);
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Parameters, alpha: f64) {
        for (a, b) in self.conv_w.iter_mut().zip(&other.conv_w) {
            a.scaled_add(alpha, b);
        }
        for (a, b) in self.conv_b.iter_mut().zip(&other.conv_b) {
            a.scaled_add(alpha, b);
        }
        for (a, b) in self.fc_w.iter_mut().zip(&other.fc_w) {
            a.scaled_add(alpha, b);
        }
        for (a, b) in self.fc_b.iter_mut().zip(&other.fc_b) {
            a.scaled_add(alpha, b);
        }
        self.out_w.scaled_add(alpha, &other.out_w);
        self.out_b.scaled_add(alpha, &other.out_b);
    }

    pub fn num_params(&self) -> usize {
        self.conv_w.iter().map(|t| t.len()).sum::<usize>()
            + self.conv_b.iter().map(|t| t.len()).sum::<usize>()
            + self.fc_w.iter().map(|t| t.len()).sum::<usize>()
            + self.fc_b.iter().map(|t| t.len()).sum::<usize>()
            + self.out_w.len()
            + self.out_b.len()
    }
}

/// Cached activations from one forward pass, sufficient for exact backward.
pub struct ForwardState {
    input: Array3<f64>,
    stage_acts: Vec<Array3<f64>>,
    stage_outs: Vec<Array3<f64>>,
    pool_argmax: Vec<Vec<usize>>,
    pooled: Vec<PooledScale>,
    concat: Array1<f64>,
    pub logits: Vec<f64>,
    pub scores: Vec<f64>,
}

struct PooledScale {
    stage: usize,
    flat: Array1<f64>,
    argmax: Vec<(usize, usize)>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// 3x3 same-padding im2col: output is `(C*9, H*W)`.
fn im2col(input: &Array3<f64>) -> Array2<f64> {
    let (c_in, h, w) = input.dim();
    let mut cols = Array2::<f64>::zeros((c_in * 9, h * w));
    for c in 0..c_in {
        for ky in 0..3usize {
            let (y_lo, y_hi) = (if ky == 0 { 1 } else { 0 }, if ky == 2 { h - 1 } else { h });
            for kx in 0..3usize {
                let (x_lo, x_hi) = (if kx == 0 { 1 } else { 0 }, if kx == 2 { w - 1 } else { w });
                if x_lo >= x_hi || y_lo >= y_hi {
                    continue;
                }
                let row = c * 9 + ky * 3 + kx;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().expect("contiguous row");
                for y in y_lo..y_hi {
                    let src_y = y + ky - 1;
                    for x in x_lo..x_hi {
                        dst[y * w + x] = input[[c, src_y, x + kx - 1]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add transpose of [`im2col`].
fn col2im(d_cols: &Array2<f64>, c_in: usize, h: usize, w: usize) -> Array3<f64> {
    let mut d_input = Array3::<f64>::zeros((c_in, h, w));
    for c in 0..c_in {
        for ky in 0..3usize {
            let (y_lo, y_hi) = (if ky == 0 { 1 } else { 0 }, if ky == 2 { h - 1 } else { h });
            for kx in 0..3usize {
                let (x_lo, x_hi) = (if kx == 0 { 1 } else { 0 }, if kx == 2 { w - 1 } else { w });
                if x_lo >= x_hi || y_lo >= y_hi {
                    continue;
                }
                let row = d_cols.row(c * 9 + ky * 3 + kx);
                let row = row.as_slice().expect("contiguous row");
                for y in y_lo..y_hi {
                    let src_y = y + ky - 1;
                    for x in x_lo..x_hi {
                        d_input[[c, src_y, x + kx - 1]] += row[y * w + x];
                    }
                }
            }
        }
    }
    d_input
}

fn conv_forward(input: &Array3<f64>, w: &Array4<f64>, b: &Array1<f64>) -> Array3<f64> {
    let (_, h, width) = input.dim();
    let (c_out, c_in, _, _) = w.dim();
    let cols = im2col(input);
    let w_flat = w
        .view()
        .into_shape((c_out, c_in * 9))
        .expect("contiguous kernel");
    let mut out = w_flat.dot(&cols);
    for (mut row, &bias) in out.axis_iter_mut(Axis(0)).zip(b.iter()) {
        row.mapv_inplace(|v| v + bias);
    }
    out.into_shape((c_out, h, width)).expect("consistent shape")
}

/// 2x2 max-pool with stride 2; records the flat argmax per output cell.
fn maxpool2(input: &Array3<f64>) -> (Array3<f64>, Vec<usize>) {
    let (c_in, h, w) = input.dim();
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Array3::<f64>::zeros((c_in, h2, w2));
    let mut argmax = vec![0usize; c_in * h2 * w2];
    for c in 0..c_in {
        for i in 0..h2 {
            for j in 0..w2 {
                let (y0, x0) = (2 * i, 2 * j);
                let mut best = input[[c, y0, x0]];
                let mut best_idx = y0 * w + x0;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let v = input[[c, y0 + dy, x0 + dx]];
                    if v > best {
                        best = v;
                        best_idx = (y0 + dy) * w + (x0 + dx);
                    }
                }
                out[[c, i, j]] = best;
                argmax[(c * h2 + i) * w2 + j] = best_idx;
            }
        }
    }
    (out, argmax)
}

/// Max-pools a feature-map region into a fixed grid. Bin boundaries are
/// `round(i * h / grid)` with every bin clamped to at least one pixel, so
/// small regions produce overlapping bins. Returns pooled values and the
/// argmax position of every bin for the backward pass.
pub fn roi_max_pool(
    fmap: &Array3<f64>,
    roi: &Rect,
    grid: (usize, usize),
) -> Result<(Array3<f64>, Vec<(usize, usize)>), ModelError> {
    let (c_in, h, w) = fmap.dim();
    let (gh, gw) = grid;
    if roi.x1 <= 0.0 || roi.y1 <= 0.0 || roi.x0 >= w as f64 || roi.y0 >= h as f64 {
        return Err(ModelError::RoiOutsideMap {
            x0: roi.x0,
            y0: roi.y0,
            x1: roi.x1,
            y1: roi.y1,
            w,
            h,
        });
    }
    let iy0 = (roi.y0.floor().max(0.0) as usize).min(h - 1);
    let ix0 = (roi.x0.floor().max(0.0) as usize).min(w - 1);
    let iy1 = (roi.y1.ceil() as usize).clamp(iy0 + 1, h);
    let ix1 = (roi.x1.ceil() as usize).clamp(ix0 + 1, w);
    let (rh, rw) = (iy1 - iy0, ix1 - ix0);

    let bin_edges = |extent: usize, bins: usize| -> Vec<(usize, usize)> {
        (0..bins)
            .map(|i| {
                let mut lo = (i as f64 * extent as f64 / bins as f64).round() as usize;
                let mut hi = ((i + 1) as f64 * extent as f64 / bins as f64).round() as usize;
                if hi <= lo {
                    hi = lo + 1;
                }
                if hi > extent {
                    hi = extent;
                    lo = lo.min(extent - 1);
                }
                (lo, hi)
            })
            .collect()
    };
    let rows = bin_edges(rh, gh);
    let cols = bin_edges(rw, gw);

    let mut out = Array3::<f64>::zeros((c_in, gh, gw));
    let mut argmax = vec![(0usize, 0usize); c_in * gh * gw];
    for c in 0..c_in {
        for (bi, &(r0, r1)) in rows.iter().enumerate() {
            for (bj, &(c0, c1)) in cols.iter().enumerate() {
                let mut best = f64::NEG_INFINITY;
                let mut best_pos = (iy0 + r0, ix0 + c0);
                for y in (iy0 + r0)..(iy0 + r1) {
                    for x in (ix0 + c0)..(ix0 + c1) {
                        let v = fmap[[c, y, x]];
                        if v > best {
                            best = v;
                            best_pos = (y, x);
                        }
                    }
                }
                out[[c, bi, bj]] = best;
                argmax[(c * gh + bi) * gw + bj] = best_pos;
            }
        }
    }
    Ok((out, argmax))
}

fn check_params(cfg: &NetworkConfig, params: &Parameters) -> Result<(), ModelError> {
    if params.conv_w.len() != cfg.n_stages {
        return Err(ModelError::Shape(format!(
            "parameters hold {} conv stages, config wants {}",
            params.conv_w.len(),
            cfg.n_stages
        )));
    }
    let mut c_in = cfg.in_channels;
    for (s, (w, b)) in params.conv_w.iter().zip(&params.conv_b).enumerate() {
        let expect = (cfg.channels[s], c_in, 3, 3);
        if w.dim() != expect {
            return Err(ModelError::Shape(format!(
                "conv{} weight is {:?}, expected {:?}",
                s + 1,
                w.dim(),
                expect
            )));
        }
        if b.len() != cfg.channels[s] {
            return Err(ModelError::Shape(format!("conv{} bias length", s + 1)));
        }
        c_in = cfg.channels[s];
    }
    let fused = cfg.fused_stages();
    if params.fc_w.len() != fused.len() {
        return Err(ModelError::Shape("per-scale FC count".into()));
    }
    for (i, (stage, _)) in fused.iter().enumerate() {
        if params.fc_w[i].dim() != (cfg.fc_dim, cfg.fc_input_dim(*stage)) {
            return Err(ModelError::Shape(format!("scale fc {} shape", i + 1)));
        }
    }
    if params.out_w.dim() != (cfg.n_labels, cfg.concat_dim()) || params.out_b.len() != cfg.n_labels
    {
        return Err(ModelError::Shape("output layer shape".into()));
    }
    Ok(())
}

/// Runs the network on one patch. Scores are strictly inside (0, 1).
pub fn forward(
    cfg: &NetworkConfig,
    params: &Parameters,
    input: &Array3<f64>,
    bbox: &Rect,
) -> Result<(Vec<f64>, ForwardState), ModelError> {
    cfg.validate()?;
    check_params(cfg, params)?;
    if input.dim().0 != cfg.in_channels {
        return Err(ModelError::Shape(format!(
            "input has {} channels, config wants {}",
            input.dim().0,
            cfg.in_channels
        )));
    }

    let mut stage_acts = Vec::with_capacity(cfg.n_stages);
    let mut stage_outs = Vec::with_capacity(cfg.n_stages);
    let mut pool_argmax = Vec::with_capacity(cfg.n_stages);
    let mut cur = input.clone();
    for s in 0..cfg.n_stages {
        let z = conv_forward(&cur, &params.conv_w[s], &params.conv_b[s]);
        let act = z.mapv(|v| v.max(0.0));
        let (pooled, argmax) = maxpool2(&act);
        if pooled.dim().1 == 0 || pooled.dim().2 == 0 {
            return Err(ModelError::Config(format!(
                "stage {} pools a {}x{} map to nothing; input too small for {} stages",
                s + 1,
                act.dim().1,
                act.dim().2,
                cfg.n_stages
            )));
        }
        stage_acts.push(act);
        pool_argmax.push(argmax);
        stage_outs.push(pooled.clone());
        cur = pooled;
    }

    let mut pooled_scales = Vec::new();
    let mut concat = Array1::<f64>::zeros(cfg.concat_dim());
    for (i, (stage, kind)) in cfg.fused_stages().into_iter().enumerate() {
        let fmap = &stage_outs[stage];
        let (_, mh, mw) = fmap.dim();
        let roi = match kind {
            RoiKind::Bbox => bbox.scaled(1.0 / (1 << (stage + 1)) as f64),
            RoiKind::Whole => Rect::new(0.0, 0.0, mw as f64, mh as f64),
        };
        let (pooled, argmax) = roi_max_pool(fmap, &roi, cfg.roi_grid)?;
        let flat = Array1::from_vec(pooled.into_raw_vec());
        let h = params.fc_w[i].dot(&flat) + &params.fc_b[i];
        concat
            .slice_mut(ndarray::s![i * cfg.fc_dim..(i + 1) * cfg.fc_dim])
            .assign(&h);
        pooled_scales.push(PooledScale {
            stage,
            flat,
            argmax,
        });
    }

    let logits = params.out_w.dot(&concat) + &params.out_b;
    let scores: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let state = ForwardState {
        input: input.clone(),
        stage_acts,
        stage_outs,
        pool_argmax,
        pooled: pooled_scales,
        concat,
        logits: logits.to_vec(),
        scores: scores.clone(),
    };
    Ok((scores, state))
}

/// Exact parameter gradients given `dL/dscores`. The state must come from a
/// matching forward pass.
pub fn backward(
    cfg: &NetworkConfig,
    params: &Parameters,
    state: &ForwardState,
    d_scores: &[f64],
) -> Result<Parameters, ModelError> {
    check_params(cfg, params)?;
    if d_scores.len() != cfg.n_labels || state.scores.len() != cfg.n_labels {
        return Err(ModelError::Shape(format!(
            "gradient length {} vs {} labels",
            d_scores.len(),
            cfg.n_labels
        )));
    }
    if state.stage_outs.len() != cfg.n_stages || state.pooled.len() != cfg.fused_stages().len() {
        return Err(ModelError::Shape(
            "forward state does not match this config (stale state?)".into(),
        ));
    }

    let mut grads = Parameters::zeros(cfg);

    // through the sigmoid
    let d_logits = Array1::from_iter(
        d_scores
            .iter()
            .zip(&state.scores)
            .map(|(&ds, &s)| ds * s * (1.0 - s)),
    );

    // output layer
    for c in 0..cfg.n_labels {
        let dl = d_logits[c];
        grads.out_w.row_mut(c).scaled_add(dl, &state.concat);
        grads.out_b[c] = dl;
    }
    let d_concat = params.out_w.t().dot(&d_logits);

    // per-scale FC and roi scatter
    let mut d_stage_out: Vec<Array3<f64>> = state
        .stage_outs
        .iter()
        .map(|m| Array3::zeros(m.dim()))
        .collect();
    for (i, pooled) in state.pooled.iter().enumerate() {
        let d_h = d_concat.slice(ndarray::s![i * cfg.fc_dim..(i + 1) * cfg.fc_dim]);
        for r in 0..cfg.fc_dim {
            grads.fc_w[i].row_mut(r).scaled_add(d_h[r], &pooled.flat);
            grads.fc_b[i][r] = d_h[r];
        }
        let d_flat = params.fc_w[i].t().dot(&d_h);
        let (gh, gw) = cfg.roi_grid;
        let c_stage = cfg.channels[pooled.stage];
        for c in 0..c_stage {
            for bi in 0..gh {
                for bj in 0..gw {
                    let idx = (c * gh + bi) * gw + bj;
                    let (y, x) = pooled.argmax[idx];
                    d_stage_out[pooled.stage][[c, y, x]] += d_flat[idx];
                }
            }
        }
    }

    // stages, last to first
    for s in (0..cfg.n_stages).rev() {
        let act = &state.stage_acts[s];
        let (c_out, h, w) = act.dim();
        let (_, h2, w2) = state.stage_outs[s].dim();

        // max-pool backward
        let mut d_act = Array3::<f64>::zeros((c_out, h, w));
        for c in 0..c_out {
            for i in 0..h2 {
                for j in 0..w2 {
                    let flat = state.pool_argmax[s][(c * h2 + i) * w2 + j];
                    d_act[[c, flat / w, flat % w]] += d_stage_out[s][[c, i, j]];
                }
            }
        }

        // ReLU backward
        let d_z = ndarray::Zip::from(&d_act)
            .and(act)
            .map_collect(|&g, &a| if a > 0.0 { g } else { 0.0 });

        // conv backward
        let stage_input = if s == 0 {
            &state.input
        } else {
            &state.stage_outs[s - 1]
        };
        let (c_in, ih, iw) = stage_input.dim();
        let cols = im2col(stage_input);
        let d_z_mat = d_z
            .view()
            .into_shape((c_out, h * w))
            .expect("contiguous activation grad");
        let d_w_flat = d_z_mat.dot(&cols.t());
        grads.conv_w[s] = d_w_flat
            .into_shape((c_out, c_in, 3, 3))
            .expect("consistent shape");
        grads.conv_b[s] = d_z_mat.sum_axis(Axis(1));

        if s > 0 {
            let w_flat = params.conv_w[s]
                .view()
                .into_shape((c_out, c_in * 9))
                .expect("contiguous kernel");
            let d_cols = w_flat.t().dot(&d_z_mat);
            let d_input = col2im(&d_cols, c_in, ih, iw);
            d_stage_out[s - 1].scaled_add(1.0, &d_input);
        }
    }

    Ok(grads)
}

/// Ids of the k highest scores, ties broken toward the lower id.
pub fn predict_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    ids.truncate(k);
    ids
}

/// One training set: parallel slices of inputs, lesion boxes, and targets.
pub struct TrainSet<'a> {
    pub inputs: &'a [Array3<f64>],
    pub bboxes: &'a [Rect],
    pub targets: &'a [LabelVector],
}

impl TrainSet<'_> {
    fn validate(&self) -> Result<(), ModelError> {
        if self.inputs.is_empty() {
            return Err(ModelError::Shape("empty training set".into()));
        }
        if self.inputs.len() != self.bboxes.len() || self.inputs.len() != self.targets.len() {
            return Err(ModelError::Shape(format!(
                "training set slices disagree: {} inputs, {} boxes, {} targets",
                self.inputs.len(),
                self.bboxes.len(),
                self.targets.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_after_drop: f64,
    /// 1-based epoch at which the learning rate drops.
    pub lr_drop_epoch: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 15,
            batch_size: 128,
            lr: 0.01,
            lr_after_drop: 0.001,
            lr_drop_epoch: 12,
            momentum: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Loss history of one training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochMetrics>,
    pub steps: Vec<StepMetrics>,
}

/// Minibatch SGD. Deterministic given the schedule seed (which drives both
/// initialization and batch order). Aborts with a diagnostic if the loss
/// stops being finite.
pub fn train(
    cfg: &NetworkConfig,
    data: &TrainSet,
    weights: &ClassWeights,
    loss_cfg: &LossConfig,
    schedule: &TrainSchedule,
) -> Result<(Parameters, TrainLog), ModelError> {
    cfg.validate()?;
    data.validate()?;
    loss_cfg
        .validate()
        .map_err(|e| ModelError::Config(e.to_string()))?;
    if schedule.batch_size == 0 {
        return Err(ModelError::Config("batch_size must be positive".into()));
    }

    let mut rng = StdRng::seed_from_u64(schedule.seed);
    let mut params = Parameters::init(cfg, rng.gen());
    let mut velocity = Parameters::zeros(cfg);
    let mut log = TrainLog::default();
    let mut indices: Vec<usize> = (0..data.inputs.len()).collect();

    for epoch in 1..=schedule.epochs {
        let lr = if epoch >= schedule.lr_drop_epoch {
            schedule.lr_after_drop
        } else {
            schedule.lr
        };
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;

        for (step, batch) in indices.chunks(schedule.batch_size).enumerate() {
            let mut grads = Parameters::zeros(cfg);
            let mut batch_loss = 0.0;
            for &i in batch {
                let (scores, state) = forward(cfg, &params, &data.inputs[i], &data.bboxes[i])?;
                let loss = multilabel_loss(&data.targets[i], &scores, weights, loss_cfg)
                    .map_err(|e| ModelError::Shape(e.to_string()))?;
                batch_loss += loss;
                let d_scores = loss_gradient(&data.targets[i], &scores, weights, loss_cfg)
                    .map_err(|e| ModelError::Shape(e.to_string()))?;
                let g = backward(cfg, &params, &state, &d_scores)?;
                grads.add_scaled(&g, 1.0);
            }
            let scale = 1.0 / batch.len() as f64;
            batch_loss *= scale;
            epoch_loss += batch_loss * batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(ModelError::Diverged {
                    epoch,
                    loss: batch_loss,
                });
            }
            log.steps.push(StepMetrics {
                epoch,
                step: step + 1,
                loss: batch_loss,
                lr,
            });
            if schedule.momentum != 0.0 {
                velocity.scale(schedule.momentum);
                velocity.add_scaled(&grads, scale);
                params.add_scaled(&velocity, -lr);
            } else {
                params.add_scaled(&grads, -lr * scale);
            }
        }

        log.epochs.push(EpochMetrics {
            epoch,
            mean_loss: epoch_loss / data.inputs.len() as f64,
            lr,
        });
    }

    Ok((params, log))
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    tensors: Vec<TensorEntry>,
}

fn tensor_list(params: &Parameters) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    for (s, (w, b)) in params.conv_w.iter().zip(&params.conv_b).enumerate() {
        let (a, bb, c, d) = w.dim();
        out.push((
            format!("conv{}.weight", s + 1),
            vec![a, bb, c, d],
            w.iter().copied().collect(),
        ));
        out.push((format!("conv{}.bias", s + 1), vec![b.len()], b.to_vec()));
    }
    for (i, (w, b)) in params.fc_w.iter().zip(&params.fc_b).enumerate() {
        let (r, c) = w.dim();
        out.push((
            format!("scale{}.fc.weight", i + 1),
            vec![r, c],
            w.iter().copied().collect(),
        ));
        out.push((format!("scale{}.fc.bias", i + 1), vec![b.len()], b.to_vec()));
    }
    let (r, c) = params.out_w.dim();
    out.push((
        "output.weight".to_string(),
        vec![r, c],
        params.out_w.iter().copied().collect(),
    ));
    out.push((
        "output.bias".to_string(),
        vec![params.out_b.len()],
        params.out_b.to_vec(),
    ));
    out
}

/// Writes parameters as one binary file: a little-endian u32 manifest
/// length, the JSON manifest of tensor names/shapes, then the tensor data
/// as little-endian float32 in manifest order.
pub fn save_checkpoint(path: impl AsRef<Path>, params: &Parameters) -> Result<(), ModelError> {
    let tensors = tensor_list(params);
    let manifest = CheckpointManifest {
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    f.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
    f.write_all(&manifest_bytes)?;
    for (_, _, data) in &tensors {
        for &v in data {
            f.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`], validating tensor
/// names and shapes against the config.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    cfg: &NetworkConfig,
) -> Result<Parameters, ModelError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 {
        return Err(ModelError::Checkpoint("file too short".into()));
    }
    let mlen = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if bytes.len() < 4 + mlen {
        return Err(ModelError::Checkpoint("truncated manifest".into()));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[4..4 + mlen])
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;

    let mut offset = 4 + mlen;
    let mut read_tensor = |shape: &[usize]| -> Result<Vec<f64>, ModelError> {
        let n: usize = shape.iter().product();
        let end = offset + n * 4;
        if bytes.len() < end {
            return Err(ModelError::Checkpoint("truncated tensor data".into()));
        }
        let data = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        offset = end;
        Ok(data)
    };

    let mut params = Parameters::zeros(cfg);
    let expected = tensor_list(&params);
    if manifest.tensors.len() != expected.len() {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint has {} tensors, config wants {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    for (entry, (name, shape, _)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(ModelError::Checkpoint(format!(
                "tensor {:?} with shape {:?} does not match expected {:?} {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
        let data = read_tensor(&entry.shape)?;
        assign_tensor(&mut params, name, &entry.shape, data)?;
    }
    Ok(params)
}

fn assign_tensor(
    params: &mut Parameters,
    name: &str,
    shape: &[usize],
    data: Vec<f64>,
) -> Result<(), ModelError> {
    let bad = || ModelError::Checkpoint(format!("cannot place tensor {name:?}"));
    if let Some(rest) = name.strip_prefix("conv") {
        let (idx, field) = rest.split_once('.').ok_or_else(bad)?;
        let s: usize = idx.parse::<usize>().map_err(|_| bad())? - 1;
        match field {
            "weight" => {
                params.conv_w[s] =
                    Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), data)
                        .map_err(|_| bad())?;
            }
            "bias" => params.conv_b[s] = Array1::from_vec(data),
            _ => return Err(bad()),
        }
    } else if let Some(rest) = name.strip_prefix("scale") {
        let (idx, field) = rest.split_once('.').ok_or_else(bad)?;
        let i: usize = idx.parse::<usize>().map_err(|_| bad())? - 1;
        match field {
            "fc.weight" => {
                params.fc_w[i] =
                    Array2::from_shape_vec((shape[0], shape[1]), data).map_err(|_| bad())?;
            }
            "fc.bias" => params.fc_b[i] = Array1::from_vec(data),
            _ => return Err(bad()),
        }
    } else if name == "output.weight" {
        params.out_w = Array2::from_shape_vec((shape[0], shape[1]), data).map_err(|_| bad())?;
    } else if name == "output.bias" {
        params.out_b = Array1::from_vec(data);
    } else {
        return Err(bad());
    }
    Ok(())
}
