//! Block-structured CNN description and its trainable realization.
//!
//! A network is a sequence of blocks, each `conv_count` repetitions of
//! `Conv2d -> BatchNorm2d -> ReLU` followed by a 2x2 max-pool, then a
//! classifier head `flatten -> Dense(hidden) -> ReLU -> Dense(K)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    maxpool_backward, maxpool_forward, relu_backward, relu_forward, BatchNorm2d, Conv2d, Dense,
    Mode, KERNEL,
};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockSpec {
    pub conv_count: usize,
    pub channels: usize,
}

impl BlockSpec {
    pub const fn new(conv_count: usize, channels: usize) -> Self {
        BlockSpec {
            conv_count,
            channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub blocks: Vec<BlockSpec>,
    /// `[H, W, C]`
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub head_hidden: usize,
}

/// Conv counts of the five VGG16 blocks.
pub const VGG16_CONV_COUNTS: [usize; 5] = [2, 2, 3, 3, 3];
/// Reduced channel widths used by the desk-scale model.
pub const MINI_VGG_CHANNELS: [usize; 5] = [8, 16, 32, 32, 32];
pub const MINI_VGG_HEAD_HIDDEN: usize = 128;

impl ModelSpec {
    /// Five VGG16-pattern blocks with reduced widths and a 128-unit head.
    pub fn mini_vgg(input_shape: [usize; 3], num_classes: usize) -> Self {
        ModelSpec {
            blocks: VGG16_CONV_COUNTS
                .iter()
                .zip(MINI_VGG_CHANNELS)
                .map(|(&n, c)| BlockSpec::new(n, c))
                .collect(),
            input_shape,
            num_classes,
            head_hidden: MINI_VGG_HEAD_HIDDEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.blocks.is_empty() {
            return bad("at least one block is required".into());
        }
        if let Some((i, _)) = self
            .blocks
            .iter()
            .enumerate()
            .find(|(_, b)| b.conv_count == 0 || b.channels == 0)
        {
            return bad(format!("block {i} needs conv_count >= 1 and channels >= 1"));
        }
        let [h, w, c] = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return bad(format!("input shape {:?} has a zero dimension", self.input_shape));
        }
        let factor = 1usize
            .checked_shl(self.blocks.len() as u32)
            .filter(|f| *f <= h.min(w))
            .unwrap_or(0);
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return bad(format!(
                "input {h}x{w} is not divisible by 2^{} for {} pooling stages",
                self.blocks.len(),
                self.blocks.len()
            ));
        }
        if self.num_classes == 0 || self.head_hidden == 0 {
            return bad("num_classes and head_hidden must be at least 1".into());
        }
        Ok(())
    }

    /// Channels entering block `index`.
    pub fn block_input_channels(&self, index: usize) -> usize {
        if index == 0 {
            self.input_shape[2]
        } else {
            self.blocks[index - 1].channels
        }
    }

    /// `[H, W, C]` after block `index`'s pool.
    pub fn block_output_shape(&self, index: usize) -> [usize; 3] {
        let div = 1 << (index + 1);
        [
            self.input_shape[0] / div,
            self.input_shape[1] / div,
            self.blocks[index].channels,
        ]
    }

    pub fn head_input(&self) -> usize {
        self.block_output_shape(self.blocks.len() - 1).iter().product()
    }

    pub fn conv_count(&self) -> usize {
        self.blocks.iter().map(|b| b.conv_count).sum()
    }
}

/// Trainable scalars in one conv + batch-norm unit.
pub fn unit_param_count(in_channels: usize, out_channels: usize) -> usize {
    KERNEL * KERNEL * in_channels * out_channels + out_channels + 2 * out_channels
}

/// Where inside a block an activation is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TapSite {
    /// After the block's max-pool.
    PostPool,
    /// After the block's last ReLU, before the pool.
    PostRelu,
}

/// Tap read by the student-teacher loss.
pub const STN_TAP: TapSite = TapSite::PostPool;
/// Tap rendered by the activation dumps.
pub const VIZ_TAP: TapSite = TapSite::PostRelu;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TapPoint {
    pub block: usize,
    pub site: TapSite,
}

impl TapPoint {
    pub const fn post_pool(block: usize) -> Self {
        TapPoint {
            block,
            site: TapSite::PostPool,
        }
    }

    pub const fn post_relu(block: usize) -> Self {
        TapPoint {
            block,
            site: TapSite::PostRelu,
        }
    }
}

/// Which parameters a training step updates. Batch norm runs in train mode
/// inside the scope and in eval mode outside it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scope {
    All,
    Block(usize),
}

impl Scope {
    pub fn trains_block(self, index: usize) -> bool {
        match self {
            Scope::All => true,
            Scope::Block(b) => b == index,
        }
    }

    pub fn trains_head(self) -> bool {
        self == Scope::All
    }

    fn lowest_block(self) -> usize {
        match self {
            Scope::All => 0,
            Scope::Block(b) => b,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit<T: Scalar = f32> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T: Scalar = f32> {
    pub units: Vec<ConvUnit<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head<T: Scalar = f32> {
    pub hidden: Dense<T>,
    pub output: Dense<T>,
}

/// Named gradients in registry order.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T: Scalar = f32> {
    pub entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

struct UnitTrace<T: Scalar> {
    conv_in: Tensor<T>,
    bn_in: Tensor<T>,
    relu_in: Tensor<T>,
}

struct BlockTrace<T: Scalar> {
    units: Vec<UnitTrace<T>>,
    pool_in: Tensor<T>,
}

struct HeadTrace<T: Scalar> {
    pooled_shape: Vec<usize>,
    hidden_in: Tensor<T>,
    relu_in: Tensor<T>,
    output_in: Tensor<T>,
}

struct Trace<T: Scalar> {
    scope: Scope,
    /// Index of the first recorded block; earlier blocks are never differentiated.
    first: usize,
    blocks: Vec<BlockTrace<T>>,
    head: Option<HeadTrace<T>>,
}

/// Instantiated network: layers, parameter registry and the activation trace
/// of the last training forward pass.
pub struct Network<T: Scalar = f32> {
    spec: ModelSpec,
    pub blocks: Vec<Block<T>>,
    pub head: Head<T>,
    compressed: Option<usize>,
    pending_init: bool,
    trace: Option<Trace<T>>,
}

impl<T: Scalar> Clone for Network<T> {
    fn clone(&self) -> Self {
        Network {
            spec: self.spec.clone(),
            blocks: self.blocks.clone(),
            head: self.head.clone(),
            compressed: self.compressed,
            pending_init: self.pending_init,
            trace: None,
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Network<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("spec", &self.spec)
            .field("compressed", &self.compressed)
            .field("params", &self.param_count())
            .finish()
    }
}

impl<T: Scalar> ConvUnit<T> {
    fn new(in_channels: usize, out_channels: usize) -> Result<Self> {
        Ok(ConvUnit {
            conv: Conv2d::new(in_channels, out_channels)?,
            bn: BatchNorm2d::new(out_channels)?,
        })
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.bn.apply(&self.conv.forward(x)?, Mode::Eval)?;
        Ok(relu_forward(&y))
    }

    fn forward(&mut self, x: &Tensor<T>, trace: Option<&mut Vec<UnitTrace<T>>>) -> Result<Tensor<T>> {
        let bn_in = self.conv.forward(x)?;
        let relu_in = self.bn.forward(&bn_in)?;
        let out = relu_forward(&relu_in);
        if let Some(trace) = trace {
            trace.push(UnitTrace {
                conv_in: x.clone(),
                bn_in,
                relu_in,
            });
        }
        Ok(out)
    }
}

impl<T: Scalar> Network<T> {
    /// Builds a network with Glorot-uniform conv/dense weights drawn from
    /// `seed`, zero biases and identity batch norms.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        for (i, b) in spec.blocks.iter().enumerate() {
            let mut cin = spec.block_input_channels(i);
            let mut units = Vec::with_capacity(b.conv_count);
            for _ in 0..b.conv_count {
                let mut unit = ConvUnit::new(cin, b.channels)?;
                unit.conv.reinit_glorot(&mut rng);
                units.push(unit);
                cin = b.channels;
            }
            blocks.push(Block { units });
        }
        let head = Head {
            hidden: Dense::glorot(spec.head_input(), spec.head_hidden, &mut rng)?,
            output: Dense::glorot(spec.head_hidden, spec.num_classes, &mut rng)?,
        };
        Ok(Network {
            spec: spec.clone(),
            blocks,
            head,
            compressed: None,
            pending_init: false,
            trace: None,
        })
    }

    /// A network of the given spec with every parameter zero and identity
    /// batch norms. Used as the target of checkpoint loads.
    pub fn zeroed(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let blocks = spec
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let mut cin = spec.block_input_channels(i);
                let units = (0..b.conv_count)
                    .map(|_| {
                        let unit = ConvUnit::new(cin, b.channels);
                        cin = b.channels;
                        unit
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Block { units })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Network {
            spec: spec.clone(),
            blocks,
            head: Head {
                hidden: Dense::new(spec.head_input(), spec.head_hidden)?,
                output: Dense::new(spec.head_hidden, spec.num_classes)?,
            },
            compressed: None,
            pending_init: false,
            trace: None,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Block that was structurally compressed to produce this network, if any.
    pub fn compressed_block(&self) -> Option<usize> {
        self.compressed
    }

    /// True while the compressed layer still awaits an initialization scheme.
    pub fn awaiting_init(&self) -> bool {
        self.pending_init
    }

    pub(crate) fn mark_compressed(&mut self, block: usize, pending_init: bool) {
        self.compressed = Some(block);
        self.pending_init = pending_init;
    }

    pub(crate) fn set_spec_and_blocks(&mut self, spec: ModelSpec, blocks: Vec<Block<T>>) {
        self.spec = spec;
        self.blocks = blocks;
        self.trace = None;
    }

    pub(crate) fn mark_initialized(&mut self) {
        self.pending_init = false;
    }

    /// Total trainable scalars: conv weights/biases, batch-norm gamma/beta,
    /// dense weights/biases.
    pub fn param_count(&self) -> usize {
        let blocks: usize = self
            .blocks
            .iter()
            .flat_map(|b| &b.units)
            .map(|u| u.conv.param_count() + u.bn.param_count())
            .sum();
        blocks + self.head.hidden.param_count() + self.head.output.param_count()
    }

    pub fn conv_layer_count(&self) -> usize {
        self.blocks.iter().map(|b| b.units.len()).sum()
    }

    pub fn pool_layer_count(&self) -> usize {
        self.blocks.len()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [h, w, c] = self.spec.input_shape;
        match *x.shape() {
            [_, xh, xw, xc] if (xh, xw, xc) == (h, w, c) => Ok(()),
            _ => Err(Error::shape(
                &[x.shape().first().copied().unwrap_or(1), h, w, c],
                x.shape(),
            )),
        }
    }

    fn check_tap(&self, tap: TapPoint) -> Result<()> {
        if tap.block >= self.blocks.len() {
            return Err(Error::InvalidTap {
                block: tap.block,
                blocks: self.blocks.len(),
            });
        }
        Ok(())
    }

    fn set_modes(&mut self, scope: Option<Scope>) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let mode = match scope {
                Some(s) if s.trains_block(i) => Mode::Train,
                _ => Mode::Eval,
            };
            for unit in &mut block.units {
                unit.bn.mode = mode;
            }
        }
    }

    // ---- inference (eval mode, no mutation) ------------------------------

    fn infer_block(&self, index: usize, x: &Tensor<T>, site: TapSite) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for unit in &self.blocks[index].units {
            h = unit.infer(&h)?;
        }
        match site {
            TapSite::PostRelu => Ok(h),
            TapSite::PostPool => maxpool_forward(&h),
        }
    }

    fn infer_head(&self, pooled: &Tensor<T>) -> Result<Tensor<T>> {
        let n = pooled.shape()[0];
        let flat = pooled.clone().reshape(&[n, self.spec.head_input()])?;
        let hidden = relu_forward(&self.head.hidden.forward(&flat)?);
        self.head.output.forward(&hidden)
    }

    /// Eval-mode activations at `tap`.
    pub fn infer_to_tap(&self, x: &Tensor<T>, tap: TapPoint) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.check_tap(tap)?;
        let mut h = x.clone();
        for i in 0..tap.block {
            h = self.infer_block(i, &h, TapSite::PostPool)?;
        }
        self.infer_block(tap.block, &h, tap.site)
    }

    /// Eval-mode activations entering block `index` (the network input for block 0).
    pub fn infer_block_input(&self, x: &Tensor<T>, index: usize) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.check_tap(TapPoint::post_pool(index))?;
        let mut h = x.clone();
        for i in 0..index {
            h = self.infer_block(i, &h, TapSite::PostPool)?;
        }
        Ok(h)
    }

    /// Eval-mode logits.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let last = self.blocks.len() - 1;
        let pooled = self.infer_to_tap(x, TapPoint::post_pool(last))?;
        self.infer_head(&pooled)
    }

    /// Applies the classifier head to the last block's pooled output.
    pub fn head_forward(&self, pooled: &Tensor<T>) -> Result<Tensor<T>> {
        let last = self.blocks.len() - 1;
        let [h, w, c] = self.spec.block_output_shape(last);
        pooled.ensure_shape(&[pooled.shape()[0], h, w, c])?;
        self.infer_head(pooled)
    }

    // ---- forward in an explicit mode -------------------------------------

    /// Logits. In train mode every batch norm uses and updates batch statistics.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Eval => {
                self.set_modes(None);
                self.predict(x)
            }
            Mode::Train => {
                let last = self.blocks.len() - 1;
                let pooled = self.forward_to_tap(x, TapPoint::post_pool(last), Mode::Train)?;
                self.infer_head(&pooled)
            }
        }
    }

    /// Activations at `tap` with every batch norm in `mode`.
    pub fn forward_to_tap(&mut self, x: &Tensor<T>, tap: TapPoint, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Eval => {
                self.set_modes(None);
                self.infer_to_tap(x, tap)
            }
            Mode::Train => {
                self.check_input(x)?;
                self.check_tap(tap)?;
                self.set_modes(Some(Scope::All));
                let mut h = x.clone();
                for i in 0..=tap.block {
                    let site = if i == tap.block { tap.site } else { TapSite::PostPool };
                    h = self.block_forward(i, &h, site, None)?;
                }
                Ok(h)
            }
        }
    }

    fn block_forward(
        &mut self,
        index: usize,
        x: &Tensor<T>,
        site: TapSite,
        trace: Option<&mut Vec<BlockTrace<T>>>,
    ) -> Result<Tensor<T>> {
        let block = &mut self.blocks[index];
        let mut h = x.clone();
        match trace {
            Some(trace) => {
                let mut units = Vec::with_capacity(block.units.len());
                for unit in &mut block.units {
                    h = unit.forward(&h, Some(&mut units))?;
                }
                let pooled = maxpool_forward(&h)?;
                trace.push(BlockTrace { units, pool_in: h });
                Ok(pooled)
            }
            None => {
                for unit in &mut block.units {
                    h = unit.forward(&h, None)?;
                }
                match site {
                    TapSite::PostRelu => Ok(h),
                    TapSite::PostPool => maxpool_forward(&h),
                }
            }
        }
    }

    // ---- training forward/backward ---------------------------------------

    /// Training forward pass to the logits. Records the trace needed by
    /// [`Network::backward`] for every block from the lowest trained one up.
    pub fn forward_train(&mut self, x: &Tensor<T>, scope: Scope) -> Result<Tensor<T>> {
        let last = self.blocks.len() - 1;
        let pooled = self.forward_train_to(x, last, scope)?;
        let n = pooled.shape()[0];
        let pooled_shape = pooled.shape().to_vec();
        let hidden_in = pooled.reshape(&[n, self.spec.head_input()])?;
        let relu_in = self.head.hidden.forward(&hidden_in)?;
        let output_in = relu_forward(&relu_in);
        let logits = self.head.output.forward(&output_in)?;
        if let Some(trace) = self.trace.as_mut() {
            trace.head = Some(HeadTrace {
                pooled_shape,
                hidden_in,
                relu_in,
                output_in,
            });
        }
        Ok(logits)
    }

    /// Training forward pass stopping at block `block`'s post-pool tap.
    pub fn forward_train_to_tap(&mut self, x: &Tensor<T>, block: usize, scope: Scope) -> Result<Tensor<T>> {
        self.check_tap(TapPoint::post_pool(block))?;
        if let Scope::Block(b) = scope {
            if b > block {
                return Err(Error::InvalidPlan(format!(
                    "trained block {b} lies beyond tap block {block}"
                )));
            }
        }
        self.forward_train_to(x, block, scope)
    }

    fn forward_train_to(&mut self, x: &Tensor<T>, last: usize, scope: Scope) -> Result<Tensor<T>> {
        self.check_input(x)?;
        if let Scope::Block(b) = scope {
            self.check_tap(TapPoint::post_pool(b))?;
        }
        self.set_modes(Some(scope));
        let first = scope.lowest_block();
        let mut h = x.clone();
        for i in 0..first.min(last + 1) {
            h = self.infer_block(i, &h, TapSite::PostPool)?;
        }
        let mut blocks = Vec::with_capacity(last + 1 - first.min(last + 1));
        for i in first..=last {
            h = self.block_forward(i, &h, TapSite::PostPool, Some(&mut blocks))?;
        }
        self.trace = Some(Trace {
            scope,
            first,
            blocks,
            head: None,
        });
        Ok(h)
    }

    /// Backpropagates `dlogits` through the last [`Network::forward_train`]
    /// and returns gradients for every parameter in its scope.
    pub fn backward(&mut self, dlogits: &Tensor<T>) -> Result<Gradients<T>> {
        let mut trace = self.take_trace()?;
        let head = trace
            .head
            .take()
            .ok_or_else(|| Error::InvalidPlan("backward needs a full forward_train pass".into()))?;
        let mut head_grads = Vec::new();
        let out = self.head.output.backward(&head.output_in, dlogits)?;
        let d_relu = relu_backward(&head.relu_in, &out.input)?;
        let hidden = self.head.hidden.backward(&head.hidden_in, &d_relu)?;
        if trace.scope.trains_head() {
            head_grads.push(("head.hidden.weight".to_string(), hidden.weight));
            head_grads.push(("head.hidden.bias".to_string(), hidden.bias));
            head_grads.push(("head.output.weight".to_string(), out.weight));
            head_grads.push(("head.output.bias".to_string(), out.bias));
        }
        let d_pooled = hidden.input.reshape(&head.pooled_shape)?;
        let mut grads = self.backward_blocks(trace, d_pooled)?;
        grads.entries.extend(head_grads);
        Ok(grads)
    }

    /// Backpropagates a gradient at the post-pool tap of the last block
    /// recorded by [`Network::forward_train_to_tap`].
    pub fn backward_from_tap(&mut self, dtap: &Tensor<T>) -> Result<Gradients<T>> {
        let trace = self.take_trace()?;
        self.backward_blocks(trace, dtap.clone())
    }

    fn take_trace(&mut self) -> Result<Trace<T>> {
        self.trace
            .take()
            .ok_or_else(|| Error::InvalidPlan("backward called without a recorded forward pass".into()))
    }

    fn backward_blocks(&mut self, trace: Trace<T>, mut d: Tensor<T>) -> Result<Gradients<T>> {
        let Trace {
            scope,
            first,
            blocks,
            ..
        } = trace;
        let mut per_block: Vec<Vec<(String, Tensor<T>)>> = Vec::new();
        for (offset, bt) in blocks.into_iter().enumerate().rev() {
            let index = first + offset;
            let trains = scope.trains_block(index);
            let block = &self.blocks[index];
            d = maxpool_backward(&bt.pool_in, &d)?;
            let mut unit_grads = Vec::new();
            for (u, (unit, ut)) in block.units.iter().zip(&bt.units).enumerate().rev() {
                d = relu_backward(&ut.relu_in, &d)?;
                let bn = unit.bn.backward(&ut.bn_in, &d)?;
                let need_input = !(index == first && u == 0);
                let conv = unit.conv.backward_with(&ut.conv_in, &bn.input, need_input)?;
                if trains {
                    unit_grads.push((format!("block{index}.bn{u}.beta"), bn.beta));
                    unit_grads.push((format!("block{index}.bn{u}.gamma"), bn.gamma));
                    unit_grads.push((format!("block{index}.conv{u}.bias"), conv.bias));
                    unit_grads.push((format!("block{index}.conv{u}.weight"), conv.weight));
                }
                if let Some(dx) = conv.input {
                    d = dx;
                }
            }
            unit_grads.reverse();
            per_block.push(unit_grads);
        }
        per_block.reverse();
        Ok(Gradients {
            entries: per_block.into_iter().flatten().collect(),
        })
    }

    // ---- parameter registry ----------------------------------------------

    /// Trainable parameters in registry order.
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        self.state()
            .into_iter()
            .filter(|(name, _)| !is_buffer(name))
            .collect()
    }

    /// Mutable trainable parameters within `scope`, in registry order.
    pub fn parameters_mut(&mut self, scope: Scope) -> Vec<(String, &mut Tensor<T>)> {
        self.state_mut()
            .into_iter()
            .filter(|(name, _)| !is_buffer(name) && name_in_scope(name, scope))
            .collect()
    }

    /// Every parameter and batch-norm running statistic, in a stable order.
    pub fn state(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            for (u, unit) in block.units.iter().enumerate() {
                out.push((format!("block{b}.conv{u}.weight"), &unit.conv.weight));
                out.push((format!("block{b}.conv{u}.bias"), &unit.conv.bias));
                out.push((format!("block{b}.bn{u}.gamma"), &unit.bn.gamma));
                out.push((format!("block{b}.bn{u}.beta"), &unit.bn.beta));
                out.push((format!("block{b}.bn{u}.running_mean"), &unit.bn.running_mean));
                out.push((format!("block{b}.bn{u}.running_var"), &unit.bn.running_var));
            }
        }
        out.push(("head.hidden.weight".into(), &self.head.hidden.weight));
        out.push(("head.hidden.bias".into(), &self.head.hidden.bias));
        out.push(("head.output.weight".into(), &self.head.output.weight));
        out.push(("head.output.bias".into(), &self.head.output.bias));
        out
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for (u, unit) in block.units.iter_mut().enumerate() {
                out.push((format!("block{b}.conv{u}.weight"), &mut unit.conv.weight));
                out.push((format!("block{b}.conv{u}.bias"), &mut unit.conv.bias));
                out.push((format!("block{b}.bn{u}.gamma"), &mut unit.bn.gamma));
                out.push((format!("block{b}.bn{u}.beta"), &mut unit.bn.beta));
                out.push((format!("block{b}.bn{u}.running_mean"), &mut unit.bn.running_mean));
                out.push((format!("block{b}.bn{u}.running_var"), &mut unit.bn.running_var));
            }
        }
        out.push(("head.hidden.weight".into(), &mut self.head.hidden.weight));
        out.push(("head.hidden.bias".into(), &mut self.head.hidden.bias));
        out.push(("head.output.weight".into(), &mut self.head.output.weight));
        out.push(("head.output.bias".into(), &mut self.head.output.bias));
        out
    }
}

fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

fn name_in_scope(name: &str, scope: Scope) -> bool {
    match scope {
        Scope::All => true,
        Scope::Block(b) => name
            .strip_prefix("block")
            .and_then(|rest| rest.split('.').next())
            .and_then(|idx| idx.parse::<usize>().ok())
            == Some(b),
    }
}
