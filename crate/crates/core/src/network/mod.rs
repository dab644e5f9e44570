//! The dynamic Res-U-Net: residual encoder, U-Net decoder with
//! periodic-shuffle upsampling, skip connections, freeze control and named
//! weight import/export.
//!
//! Decoder shapes are inferred from the encoder configuration rather than
//! hard-coded: each block shuffles the previous feature map up by 2,
//! concatenates the matching encoder stage and applies two 3x3
//! conv/batch-norm/ReLU pairs whose width is twice the skip width. The head
//! is a channel-expanding 1x1 convolution feeding a final shuffle to full
//! resolution, a two-conv extension over the shuffle output concatenated
//! with the network input, and a 1x1 pooler down to the two class channels.

mod archive;

pub use archive::TensorArchive;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, pixel_shuffle, pixel_unshuffle, split_channels, BatchNorm2d, BnMode, Conv2d,
    MaxPool3x3s2, Relu, Param, Tensor,
};
use crate::rng::Rng;

/// Network construction parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// (H, W), both divisible by 32.
    pub input_size: (usize, usize),
    /// Stem width followed by the four stage widths.
    pub encoder_widths: Vec<usize>,
    /// Residual blocks per stage.
    pub encoder_blocks: Vec<usize>,
    /// Output channels; building segmentation uses 2.
    pub out_classes: usize,
    /// Optional pretrained encoder weight archive.
    pub pretrained: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: (224, 224),
            encoder_widths: vec![64, 64, 128, 256, 512],
            encoder_blocks: vec![3, 4, 6, 3],
            out_classes: 2,
            pretrained: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h < 32 || w < 32 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be at least 32 and divisible by 32"
            )));
        }
        if self.out_classes != 2 {
            return Err(Error::Config(format!(
                "out_classes must be 2, got {}",
                self.out_classes
            )));
        }
        if self.encoder_widths.len() != 5 {
            return Err(Error::Config(format!(
                "encoder_widths needs 5 entries (stem + 4 stages), got {}",
                self.encoder_widths.len()
            )));
        }
        if self.encoder_blocks.len() != 4 {
            return Err(Error::Config(format!(
                "encoder_blocks needs 4 entries, got {}",
                self.encoder_blocks.len()
            )));
        }
        if self.encoder_widths.iter().any(|&w| w == 0 || w % 4 != 0) {
            return Err(Error::Config(
                "encoder widths must be positive multiples of 4 (shuffle divisibility)".into(),
            ));
        }
        if self.encoder_blocks.contains(&0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        Ok(())
    }

    /// A small configuration for desk-scale experiments and probes.
    pub fn small(input: usize) -> ModelConfig {
        ModelConfig {
            input_size: (input, input),
            encoder_widths: vec![8, 8, 16, 32, 64],
            encoder_blocks: vec![1, 1, 1, 1],
            out_classes: 2,
            pretrained: None,
        }
    }
}

/// Whether everything but the head is frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreezePolicy {
    /// Encoder and decoder fixed (bit-identical, batch-norm statistics
    /// included); only the head trains.
    Frozen,
    /// All parameter groups train.
    Unfrozen,
}

impl FreezePolicy {
    pub fn trainable(&self, group: &str) -> bool {
        match self {
            FreezePolicy::Unfrozen => true,
            FreezePolicy::Frozen => group == "head",
        }
    }
}

/// Parameter group of a fully-qualified tensor name.
pub fn group_of(name: &str) -> String {
    let mut parts = name.split('.');
    match parts.next() {
        Some("encoder") | Some("decoder") => {
            let second = parts.next().unwrap_or("");
            format!("{}.{}", name.split('.').next().unwrap(), second)
        }
        Some(first) => first.to_string(),
        None => String::new(),
    }
}

/// Conv -> BatchNorm -> ReLU.
#[derive(Debug, Clone)]
struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
    relu: Relu,
}

impl ConvBnRelu {
    fn new(name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(&format!("{name}.conv"), in_ch, out_ch, kernel, stride, pad, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), out_ch),
            relu: Relu::new(),
        }
    }

    fn compute(&self, x: &Tensor) -> Tensor {
        Relu::compute(&self.bn.compute_eval(&self.conv.compute(x)))
    }

    fn forward(&mut self, x: &Tensor, mode: BnMode) -> Tensor {
        let y = self.conv.forward(x, true);
        let y = self.bn.forward(&y, mode, true);
        self.relu.forward(&y, true)
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let g = self.relu.backward(gy);
        let g = self.bn.backward(&g);
        self.conv.backward(&g)
    }
}

/// Two-conv residual block with optional projection shortcut.
#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    down: Option<(Conv2d, BatchNorm2d)>,
    relu_out: Relu,
}

impl BasicBlock {
    fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut Rng) -> Self {
        let down = if stride != 1 || in_ch != out_ch {
            Some((
                Conv2d::new(&format!("{name}.down.conv"), in_ch, out_ch, 1, stride, 0, rng),
                BatchNorm2d::new(&format!("{name}.down.bn"), out_ch),
            ))
        } else {
            None
        };
        BasicBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), out_ch),
            relu1: Relu::new(),
            conv2: Conv2d::new(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), out_ch),
            down,
            relu_out: Relu::new(),
        }
    }

    fn compute(&self, x: &Tensor) -> Tensor {
        let main = self.bn1.compute_eval(&self.conv1.compute(x));
        let main = Relu::compute(&main);
        let main = self.bn2.compute_eval(&self.conv2.compute(&main));
        let shortcut = match &self.down {
            Some((conv, bn)) => bn.compute_eval(&conv.compute(x)),
            None => x.clone(),
        };
        let mut y = main;
        for (v, s) in y.data.iter_mut().zip(&shortcut.data) {
            *v += s;
        }
        Relu::compute(&y)
    }

    fn forward(&mut self, x: &Tensor, mode: BnMode) -> Tensor {
        let main = self.conv1.forward(x, true);
        let main = self.bn1.forward(&main, mode, true);
        let main = self.relu1.forward(&main, true);
        let main = self.conv2.forward(&main, true);
        let main = self.bn2.forward(&main, mode, true);
        let shortcut = match &mut self.down {
            Some((conv, bn)) => {
                let s = conv.forward(x, true);
                bn.forward(&s, mode, true)
            }
            None => x.clone(),
        };
        let mut y = main;
        for (v, s) in y.data.iter_mut().zip(&shortcut.data) {
            *v += s;
        }
        self.relu_out.forward(&y, true)
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let g = self.relu_out.backward(gy);
        // main path
        let gm = self.bn2.backward(&g);
        let gm = self.conv2.backward(&gm);
        let gm = self.relu1.backward(&gm);
        let gm = self.bn1.backward(&gm);
        let mut gx = self.conv1.backward(&gm);
        // shortcut path
        match &mut self.down {
            Some((conv, bn)) => {
                let gs = bn.backward(&g);
                let gs = conv.backward(&gs);
                for (a, b) in gx.data.iter_mut().zip(&gs.data) {
                    *a += b;
                }
            }
            None => {
                for (a, b) in gx.data.iter_mut().zip(&g.data) {
                    *a += b;
                }
            }
        }
        gx
    }
}

/// Shuffle-up, concatenate the skip, two conv/bn/relu pairs.
#[derive(Debug, Clone)]
struct DecoderBlock {
    conv_a: ConvBnRelu,
    conv_b: ConvBnRelu,
    up_ch: usize,
}

impl DecoderBlock {
    fn new(name: &str, prev_ch: usize, skip_ch: usize, rng: &mut Rng) -> Self {
        let up_ch = prev_ch / 4;
        let in_ch = up_ch + skip_ch;
        let out_ch = 2 * skip_ch;
        DecoderBlock {
            conv_a: ConvBnRelu::new(&format!("{name}.conv_a"), in_ch, out_ch, 3, 1, 1, rng),
            conv_b: ConvBnRelu::new(&format!("{name}.conv_b"), out_ch, out_ch, 3, 1, 1, rng),
            up_ch,
        }
    }

    fn out_ch(&self) -> usize {
        self.conv_b.conv.out_ch
    }

    fn compute(&self, prev: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let up = pixel_shuffle(prev, 2)?;
        let cat = concat_channels(&up, skip)?;
        Ok(self.conv_b.compute(&self.conv_a.compute(&cat)))
    }

    fn forward(&mut self, prev: &Tensor, skip: &Tensor, mode: BnMode) -> Result<Tensor> {
        let up = pixel_shuffle(prev, 2)?;
        let cat = concat_channels(&up, skip)?;
        let y = self.conv_a.forward(&cat, mode);
        Ok(self.conv_b.forward(&y, mode))
    }

    /// Returns (grad wrt prev, grad wrt skip).
    fn backward(&mut self, gy: &Tensor) -> Result<(Tensor, Tensor)> {
        let g = self.conv_b.backward(gy);
        let g = self.conv_a.backward(&g);
        let (g_up, g_skip) = split_channels(&g, self.up_ch);
        Ok((pixel_unshuffle(&g_up, 2)?, g_skip))
    }
}

/// The assembled segmentation network.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub cfg: ModelConfig,
    stem: ConvBnRelu,
    pool: MaxPool3x3s2,
    stages: Vec<Vec<BasicBlock>>,
    decoder: Vec<DecoderBlock>,
    up_conv: Conv2d,
    ext1: ConvBnRelu,
    ext2: ConvBnRelu,
    pooler: Conv2d,
    freeze: FreezePolicy,
    /// Set by forward_train, consumed by backward.
    forward_pending: bool,
}

/// Build the network with seeded He initialization; loads pretrained
/// encoder weights afterwards when the config names an archive.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<SegModel> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(seed);
    let w = &cfg.encoder_widths;
    let stem = ConvBnRelu::new("encoder.stem", 3, w[0], 7, 2, 3, &mut rng);
    let mut stages = Vec::with_capacity(4);
    let mut in_ch = w[0];
    for (si, (&width, &blocks)) in w[1..].iter().zip(&cfg.encoder_blocks).enumerate() {
        let mut stage = Vec::with_capacity(blocks);
        for b in 0..blocks {
            // stage 1 keeps stride 1 (the pool already halved); later stages
            // downsample in their first block
            let stride = if si > 0 && b == 0 { 2 } else { 1 };
            let block_in = if b == 0 { in_ch } else { width };
            stage.push(BasicBlock::new(
                &format!("encoder.stage{}.block{}", si + 1, b),
                block_in,
                width,
                stride,
                &mut rng,
            ));
        }
        stages.push(stage);
        in_ch = width;
    }

    let skips = [w[4], w[3], w[2], w[1], w[0]];
    let mut decoder = Vec::with_capacity(4);
    let mut prev = skips[0];
    for (i, &skip) in skips[1..].iter().enumerate() {
        let block = DecoderBlock::new(&format!("decoder.block{}", i + 1), prev, skip, &mut rng);
        prev = block.out_ch();
        decoder.push(block);
    }

    // final up: 1x1 expansion to 4x channels, ICNR-initialized, then shuffle
    let mut up_conv = Conv2d::new("head.up.conv", prev, 4 * prev, 1, 1, 0, &mut rng);
    up_conv.icnr_init(2, &mut rng);
    let ext_ch = prev + 3;
    let ext1 = ConvBnRelu::new("head.ext1", ext_ch, ext_ch, 3, 1, 1, &mut rng);
    let ext2 = ConvBnRelu::new("head.ext2", ext_ch, ext_ch, 3, 1, 1, &mut rng);
    let pooler = Conv2d::new("head.pooler", ext_ch, cfg.out_classes, 1, 1, 0, &mut rng);

    let mut model = SegModel {
        cfg: cfg.clone(),
        stem,
        pool: MaxPool3x3s2::new(),
        stages,
        decoder,
        up_conv,
        ext1,
        ext2,
        pooler,
        freeze: FreezePolicy::Unfrozen,
        forward_pending: false,
    };
    if let Some(path) = &cfg.pretrained {
        load_pretrained_encoder(&mut model, path)?;
    }
    Ok(model)
}

impl SegModel {
    pub fn freeze_policy(&self) -> FreezePolicy {
        self.freeze
    }

    /// Frozen: encoder and decoder fixed, head trainable. Unfrozen: all
    /// groups trainable.
    pub fn set_frozen(&mut self, policy: FreezePolicy) {
        self.freeze = policy;
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.c != 3 {
            return Err(Error::shape("3 input channels", x.c));
        }
        if x.h < 32 || x.w < 32 || x.h % 32 != 0 || x.w % 32 != 0 {
            return Err(Error::shape("H,W divisible by 32", format!("{}x{}", x.h, x.w)));
        }
        Ok(())
    }

    /// Inference forward on an immutable model: batch-norm uses running
    /// statistics, nothing is cached.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let s0 = self.stem.compute(x);
        let p0 = MaxPool3x3s2::compute(&s0);
        let mut feats = Vec::with_capacity(4);
        let mut cur = p0;
        for stage in &self.stages {
            for block in stage {
                cur = block.compute(&cur);
            }
            feats.push(cur.clone());
        }
        let mut prev = feats[3].clone();
        let skips = [&feats[2], &feats[1], &feats[0], &s0];
        for (block, skip) in self.decoder.iter().zip(skips) {
            prev = block.compute(&prev, skip)?;
        }
        let up = pixel_shuffle(&self.up_conv.compute(&prev), 2)?;
        let cat = concat_channels(&up, x)?;
        let y = self.ext1.compute(&cat);
        let y = self.ext2.compute(&y);
        Ok(self.pooler.compute(&y))
    }

    /// Encoder feature shapes at each stage for an input size; used by shape
    /// tests and error messages.
    pub fn encoder_shapes(&self, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        let (mut ch, mut cw) = (h / 4, w / 4);
        for (i, width) in self.cfg.encoder_widths[1..].iter().enumerate() {
            if i > 0 {
                ch /= 2;
                cw /= 2;
            }
            out.push((*width, ch, cw));
        }
        out
    }

    /// Run just the encoder and report each stage's actual output shape.
    pub fn encoder_feature_shapes(&self, x: &Tensor) -> Result<Vec<(usize, usize, usize)>> {
        self.check_input(x)?;
        let s0 = self.stem.compute(x);
        let mut cur = MaxPool3x3s2::compute(&s0);
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for block in stage {
                cur = block.compute(&cur);
            }
            out.push((cur.c, cur.h, cur.w));
        }
        Ok(out)
    }

    fn bn_mode(&self, group: &str) -> BnMode {
        if self.freeze.trainable(group) {
            BnMode::Train
        } else {
            BnMode::Eval
        }
    }

    /// Training forward: caches activations inside the layers for
    /// [`SegModel::backward`]. Batch norm runs in batch mode only for
    /// trainable groups, so frozen groups stay bit-identical.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let stem_mode = self.bn_mode("encoder.stem");
        let s0 = self.stem.forward(x, stem_mode);
        let p0 = self.pool.forward(&s0, true);
        let mut cur = p0;
        let mut feats = Vec::with_capacity(4);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let mode = if self.freeze.trainable(&format!("encoder.stage{}", i + 1)) {
                BnMode::Train
            } else {
                BnMode::Eval
            };
            for block in stage.iter_mut() {
                cur = block.forward(&cur, mode);
            }
            feats.push(cur.clone());
        }
        let mut prev = feats[3].clone();
        {
            let skips = [&feats[2], &feats[1], &feats[0], &s0];
            for (i, (block, skip)) in self.decoder.iter_mut().zip(skips).enumerate() {
                let mode = if self.freeze.trainable(&format!("decoder.block{}", i + 1)) {
                    BnMode::Train
                } else {
                    BnMode::Eval
                };
                prev = block.forward(&prev, skip, mode)?;
            }
        }
        let head_mode = self.bn_mode("head");
        let up = pixel_shuffle(&self.up_conv.forward(&prev, true), 2)?;
        let cat = concat_channels(&up, x)?;
        let y = self.ext1.forward(&cat, head_mode);
        let y = self.ext2.forward(&y, head_mode);
        let logits = self.pooler.forward(&y, true);
        self.forward_pending = true;
        Ok(logits)
    }

    /// Backpropagate from the logit gradient, accumulating parameter
    /// gradients throughout the network.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<()> {
        if !self.forward_pending {
            return Err(Error::Numeric("backward called without forward_train".into()));
        }
        self.forward_pending = false;
        let g = self.pooler.backward(grad_logits);
        let g = self.ext2.backward(&g);
        let g = self.ext1.backward(&g);
        let up_ch = self.up_conv.out_ch / 4;
        let (g_up, _g_input) = split_channels(&g, up_ch);
        let g = pixel_unshuffle(&g_up, 2)?;
        let mut g_prev = self.up_conv.backward(&g);

        let mut skip_grads: Vec<Tensor> = Vec::with_capacity(4);
        for block in self.decoder.iter_mut().rev() {
            let (gp, gs) = block.backward(&g_prev)?;
            skip_grads.push(gs);
            g_prev = gp;
        }
        // skip_grads now holds [g_s0, g_s1, g_s2, g_s3] in that order
        let g_s0_skip = skip_grads.remove(0);
        let mut g_stage = g_prev; // gradient flowing into stage 4 output
        for (i, stage) in self.stages.iter_mut().enumerate().rev() {
            if i < 3 {
                // g_stage is w.r.t. this stage's output here, which decoder
                // block 3-i also consumed as its skip
                let gs = &skip_grads[i];
                for (a, b) in g_stage.data.iter_mut().zip(&gs.data) {
                    *a += b;
                }
            }
            for block in stage.iter_mut().rev() {
                g_stage = block.backward(&g_stage);
            }
        }
        let g_p0 = g_stage;
        let mut g_s0 = self.pool.backward(&g_p0);
        for (a, b) in g_s0.data.iter_mut().zip(&g_s0_skip.data) {
            *a += b;
        }
        let _ = self.stem.backward(&g_s0);
        Ok(())
    }

    /// Visit every trainable parameter with its group tag, in a fixed
    /// construction order.
    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, &mut Param)) {
        let mut emit = |group: String, p: &mut Param| f(&group, p);
        for p in self.stem.conv.params_mut() {
            emit("encoder.stem".into(), p);
        }
        for p in self.stem.bn.params_mut() {
            emit("encoder.stem".into(), p);
        }
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let group = format!("encoder.stage{}", i + 1);
            for block in stage.iter_mut() {
                for p in block.conv1.params_mut() {
                    emit(group.clone(), p);
                }
                for p in block.bn1.params_mut() {
                    emit(group.clone(), p);
                }
                for p in block.conv2.params_mut() {
                    emit(group.clone(), p);
                }
                for p in block.bn2.params_mut() {
                    emit(group.clone(), p);
                }
                if let Some((conv, bn)) = &mut block.down {
                    for p in conv.params_mut() {
                        emit(group.clone(), p);
                    }
                    for p in bn.params_mut() {
                        emit(group.clone(), p);
                    }
                }
            }
        }
        for (i, block) in self.decoder.iter_mut().enumerate() {
            let group = format!("decoder.block{}", i + 1);
            for cbr in [&mut block.conv_a, &mut block.conv_b] {
                for p in cbr.conv.params_mut() {
                    emit(group.clone(), p);
                }
                for p in cbr.bn.params_mut() {
                    emit(group.clone(), p);
                }
            }
        }
        for p in self.up_conv.params_mut() {
            emit("head".into(), p);
        }
        for cbr in [&mut self.ext1, &mut self.ext2] {
            for p in cbr.conv.params_mut() {
                emit("head".into(), p);
            }
            for p in cbr.bn.params_mut() {
                emit("head".into(), p);
            }
        }
        for p in self.pooler.params_mut() {
            emit("head".into(), p);
        }
    }

    /// Visit batch-norm running statistics (name, values) pairs.
    fn visit_buffers_mut(&mut self, f: &mut impl FnMut(String, &mut Vec<f32>)) {
        let visit_bn = |prefix: &str, bn: &mut BatchNorm2d, f: &mut dyn FnMut(String, &mut Vec<f32>)| {
            f(format!("{prefix}.running_mean"), &mut bn.running_mean);
            f(format!("{prefix}.running_var"), &mut bn.running_var);
        };
        visit_bn("encoder.stem.bn", &mut self.stem.bn, f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                let base = format!("encoder.stage{}.block{}", i + 1, b);
                visit_bn(&format!("{base}.bn1"), &mut block.bn1, f);
                visit_bn(&format!("{base}.bn2"), &mut block.bn2, f);
                if let Some((_, bn)) = &mut block.down {
                    visit_bn(&format!("{base}.down.bn"), bn, f);
                }
            }
        }
        for (i, block) in self.decoder.iter_mut().enumerate() {
            let base = format!("decoder.block{}", i + 1);
            visit_bn(&format!("{base}.conv_a.bn"), &mut block.conv_a.bn, f);
            visit_bn(&format!("{base}.conv_b.bn"), &mut block.conv_b.bn, f);
        }
        visit_bn("head.ext1.bn", &mut self.ext1.bn, f);
        visit_bn("head.ext2.bn", &mut self.ext2.bn, f);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    /// Dump every parameter and buffer into a tensor archive.
    pub fn state_dict(&mut self) -> TensorArchive {
        let mut archive = TensorArchive::default();
        self.visit_params_mut(&mut |_, p| {
            archive.insert(p.name.clone(), p.shape.clone(), p.data.clone());
        });
        self.visit_buffers_mut(&mut |name, buf| {
            archive.insert(name, vec![buf.len()], buf.clone());
        });
        archive
    }

    /// Restore parameters and buffers from an archive produced by
    /// [`SegModel::state_dict`]. Every tensor must be present with a
    /// matching shape.
    pub fn load_state(&mut self, archive: &TensorArchive) -> Result<()> {
        let mut err: Option<Error> = None;
        self.visit_params_mut(&mut |_, p| {
            if err.is_some() {
                return;
            }
            match archive.get(&p.name) {
                Some((shape, data)) if *shape == p.shape => p.data.copy_from_slice(data),
                Some((shape, _)) => {
                    err = Some(Error::Data(format!(
                        "{}: shape mismatch, expected {:?}, archive has {:?}",
                        p.name, p.shape, shape
                    )))
                }
                None => err = Some(Error::Data(format!("archive is missing tensor {}", p.name))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let mut err: Option<Error> = None;
        self.visit_buffers_mut(&mut |name, buf| {
            if err.is_some() {
                return;
            }
            match archive.get(&name) {
                Some((_, data)) if data.len() == buf.len() => buf.copy_from_slice(data),
                Some(_) => err = Some(Error::Data(format!("{name}: buffer length mismatch"))),
                None => err = Some(Error::Data(format!("archive is missing buffer {name}"))),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}


/// Replace the encoder parameter groups from a weight archive; decoder and
/// head are untouched. A shape mismatch or missing tensor is reported with
/// the offending group name.
pub fn load_pretrained_encoder(model: &mut SegModel, path: &Path) -> Result<()> {
    let archive = TensorArchive::read(path)?;
    let mut err: Option<Error> = None;
    model.visit_params_mut(&mut |group, p| {
        if err.is_some() || !group.starts_with("encoder") {
            return;
        }
        match archive.get(&p.name) {
            Some((shape, data)) if *shape == p.shape => p.data.copy_from_slice(data),
            Some((shape, _)) => {
                err = Some(Error::Data(format!(
                    "{group}: pretrained shape mismatch for {} (expected {:?}, file has {:?})",
                    p.name, p.shape, shape
                )))
            }
            None => {
                err = Some(Error::Data(format!(
                    "{group}: pretrained archive is missing {}",
                    p.name
                )))
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    // running statistics come along when the archive carries them
    model.visit_buffers_mut(&mut |name, buf| {
        if name.starts_with("encoder") {
            if let Some((_, data)) = archive.get(&name) {
                if data.len() == buf.len() {
                    buf.copy_from_slice(data);
                }
            }
        }
    });
    Ok(())
}

/// Training checkpoint metadata stored alongside the tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub epoch: usize,
    pub best_val_loss: f64,
    pub prng_state: [u64; 4],
}

pub fn save_checkpoint(model: &mut SegModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut archive = model.state_dict();
    archive.metadata =
        serde_json::to_value(meta).map_err(|e| Error::Data(format!("checkpoint meta: {e}")))?;
    archive.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(SegModel, CheckpointMeta)> {
    let archive = TensorArchive::read(path)?;
    let meta: CheckpointMeta = serde_json::from_value(archive.metadata.clone())
        .map_err(|e| Error::Data(format!("{}: bad checkpoint metadata: {e}", path.display())))?;
    let mut model = build_model(&meta.config, 0)?;
    model.load_state(&archive)?;
    Ok((model, meta))
}

#[cfg(test)]
impl ModelConfig {
    /// Test helper: same widths, different input size.
    fn tap_input(mut self, hw: usize) -> ModelConfig {
        self.input_size = (hw, hw);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn random_input(seed: u64, n: usize, h: usize, w: usize) -> Tensor {
        let mut rng = Rng::seed_from_u64(seed);
        Tensor::from_vec(
            n,
            3,
            h,
            w,
            (0..n * 3 * h * w).map(|_| rng.next_f64() as f32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn shape_contract_small_config() {
        let model = build_model(&ModelConfig::small(64), 0).unwrap();
        for hw in [64usize, 128] {
            let x = random_input(1, 1, hw, hw);
            let y = model.forward(&x).unwrap();
            assert_eq!(y.shape(), (1, 2, hw, hw));
        }
        // rectangular inputs propagate through the dynamic decoder too
        for (h, w) in [(64usize, 128usize), (128, 64), (64, 224)] {
            let x = random_input(2, 1, h, w);
            let y = model.forward(&x).unwrap();
            assert_eq!(y.shape(), (1, 2, h, w));
        }
    }

    #[test]
    fn batch_dimension_preserved() {
        let model = build_model(&ModelConfig::small(64), 0).unwrap();
        let x = random_input(2, 4, 64, 64);
        let y = model.forward(&x).unwrap();
        assert_eq!(y.n, 4);
    }

    #[test]
    fn all_zero_input_gives_finite_logits() {
        let model = build_model(&ModelConfig::small(64), 0).unwrap();
        let x = Tensor::zeros(1, 3, 64, 64);
        let y = model.forward(&x).unwrap();
        assert!(y.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_bad_input_shape() {
        let model = build_model(&ModelConfig::small(64), 0).unwrap();
        assert!(model.forward(&Tensor::zeros(1, 3, 60, 64)).is_err());
        assert!(model.forward(&Tensor::zeros(1, 1, 64, 64)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut bad = ModelConfig::default();
        bad.input_size = (100, 224);
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::default();
        bad.out_classes = 3;
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::default();
        bad.encoder_widths = vec![64, 64, 126, 256, 512];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn group_names() {
        assert_eq!(group_of("encoder.stem.conv.weight"), "encoder.stem");
        assert_eq!(group_of("encoder.stage3.block1.bn2.gamma"), "encoder.stage3");
        assert_eq!(group_of("decoder.block2.conv_a.conv.bias"), "decoder.block2");
        assert_eq!(group_of("head.pooler.weight"), "head");
    }

    #[test]
    fn every_group_receives_gradient_when_unfrozen() {
        let mut model = build_model(&ModelConfig::small(32).tap_input(64), 7).unwrap();
        let x = random_input(3, 2, 64, 64);
        let logits = model.forward_train(&x).unwrap();
        let gy = Tensor::from_vec(
            logits.n,
            logits.c,
            logits.h,
            logits.w,
            logits.data.iter().map(|v| v.signum() * 0.01 + 0.001).collect(),
        )
        .unwrap();
        model.backward(&gy).unwrap();
        let mut groups: std::collections::BTreeMap<String, f64> = Default::default();
        model.visit_params_mut(&mut |group, p| {
            let sum: f64 = p.grad.iter().map(|&g| (g as f64).abs()).sum();
            *groups.entry(group.to_string()).or_default() += sum;
        });
        assert_eq!(groups.len(), 10); // stem, 4 stages, 4 decoder blocks, head
        for (group, sum) in groups {
            assert!(sum > 0.0, "group {group} received no gradient");
        }
    }

    #[test]
    fn state_dict_round_trip() {
        let mut model = build_model(&ModelConfig::small(64), 11).unwrap();
        let dump = model.state_dict();
        let mut other = build_model(&ModelConfig::small(64), 999).unwrap();
        other.load_state(&dump).unwrap();
        let x = random_input(5, 1, 64, 64);
        assert_eq!(model.forward(&x).unwrap(), other.forward(&x).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.gsck");
        let mut model = build_model(&ModelConfig::small(64), 13).unwrap();
        let meta = CheckpointMeta {
            config: ModelConfig::small(64),
            epoch: 5,
            best_val_loss: 0.25,
            prng_state: [1, 2, 3, 4],
        };
        save_checkpoint(&mut model, &meta, &path).unwrap();
        let (restored, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta2.epoch, 5);
        assert_eq!(meta2.prng_state, [1, 2, 3, 4]);
        let x = random_input(5, 1, 64, 64);
        assert_eq!(model.forward(&x).unwrap(), restored.forward(&x).unwrap());
    }

    #[test]
    fn pretrained_encoder_import_and_mismatch() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("enc.gsck");
        let mut donor = build_model(&ModelConfig::small(64), 21).unwrap();
        donor.state_dict().write(&path).unwrap();

        let mut model = build_model(&ModelConfig::small(64), 22).unwrap();
        load_pretrained_encoder(&mut model, &path).unwrap();
        // encoder tensors equal the donor's, head differs
        let donor_dump = donor.state_dict();
        let model_dump = model.state_dict();
        for (name, (_, data)) in &donor_dump.tensors {
            if name.starts_with("encoder") {
                assert_eq!(model_dump.get(name).unwrap().1, *data, "{name}");
            }
        }
        assert_ne!(
            model_dump.get("head.pooler.weight").unwrap().1,
            donor_dump.get("head.pooler.weight").unwrap().1
        );

        // wrong width: error must name the offending group
        let mut narrow_cfg = ModelConfig::small(64);
        narrow_cfg.encoder_widths = vec![8, 8, 16, 32, 32];
        let mut narrow = build_model(&narrow_cfg, 23).unwrap();
        let err = load_pretrained_encoder(&mut narrow, &path).unwrap_err().to_string();
        assert!(err.contains("encoder.stage4"), "{err}");
    }
}
