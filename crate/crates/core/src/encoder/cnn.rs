//! Reduced-width convolutional backbones for the backbone ablation. They keep
//! the stage layout of their namesakes (block counts, basic versus bottleneck
//! residual blocks, multi-branch inception modules) at a desk-scale width.

use platter_tape::nn::{LayerNorm, Linear};
use platter_tape::{Graph, ParamStore, Var};
use rand::Rng;

/// `k x k` convolution with stride `stride` and `k / 2` zero padding over a
/// raster `(h*w) x channels` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub kernel: usize,
    pub stride: usize,
    pub proj: Linear,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            kernel,
            stride,
            proj: Linear::new(store, name, kernel * kernel * cin, cout, rng),
        }
    }

    pub fn out_side(&self, side: usize) -> usize {
        (side + 2 * (self.kernel / 2) - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: usize, w: usize) -> (Var, usize, usize) {
        let cols = g.im2col(x, h, w, self.kernel, self.stride, self.kernel / 2);
        let y = self.proj.forward(g, store, cols);
        (y, self.out_side(h), self.out_side(w))
    }
}

/// Convolution, per-position channel normalization, ReLU.
#[derive(Clone, Debug, PartialEq)]
struct ConvUnit {
    conv: Conv2d,
    norm: LayerNorm,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, kernel, stride, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), cout),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: usize, w: usize, act: bool) -> (Var, usize, usize) {
        let (y, oh, ow) = self.conv.forward(g, store, x, h, w);
        let y = self.norm.forward(g, store, y);
        (if act { g.relu(y) } else { y }, oh, ow)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Block {
    Basic {
        a: ConvUnit,
        b: ConvUnit,
        shortcut: Option<ConvUnit>,
    },
    Bottleneck {
        reduce: ConvUnit,
        mid: ConvUnit,
        expand: ConvUnit,
        shortcut: Option<ConvUnit>,
    },
    Inception {
        single: ConvUnit,
        double: [ConvUnit; 2],
        triple: [ConvUnit; 3],
        merge: ConvUnit,
    },
}

impl Block {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: usize, w: usize) -> (Var, usize, usize) {
        match self {
            Block::Basic { a, b, shortcut } => {
                let (y, oh, ow) = a.forward(g, store, x, h, w, true);
                let (y, _, _) = b.forward(g, store, y, oh, ow, false);
                let skip = shortcut.as_ref().map_or(x, |s| s.forward(g, store, x, h, w, false).0);
                let sum = g.add(y, skip);
                (g.relu(sum), oh, ow)
            }
            Block::Bottleneck {
                reduce,
                mid,
                expand,
                shortcut,
            } => {
                let (y, _, _) = reduce.forward(g, store, x, h, w, true);
                let (y, oh, ow) = mid.forward(g, store, y, h, w, true);
                let (y, _, _) = expand.forward(g, store, y, oh, ow, false);
                let skip = shortcut.as_ref().map_or(x, |s| s.forward(g, store, x, h, w, false).0);
                let sum = g.add(y, skip);
                (g.relu(sum), oh, ow)
            }
            Block::Inception {
                single,
                double,
                triple,
                merge,
            } => {
                let (b1, oh, ow) = single.forward(g, store, x, h, w, true);
                let (t, _, _) = double[0].forward(g, store, x, h, w, true);
                let (b2, _, _) = double[1].forward(g, store, t, h, w, true);
                let (t, _, _) = triple[0].forward(g, store, x, h, w, true);
                let (t, _, _) = triple[1].forward(g, store, t, h, w, true);
                let (b3, _, _) = triple[2].forward(g, store, t, h, w, true);
                let cat = g.concat_cols(&[b1, b2, b3]);
                let (y, _, _) = merge.forward(g, store, cat, oh, ow, false);
                let sum = g.add(y, x);
                (g.relu(sum), oh, ow)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CnnKind {
    Resnet18,
    Resnet50,
    Resnet101,
    InceptionV3,
}

impl CnnKind {
    fn blocks_per_stage(self) -> &'static [usize] {
        match self {
            CnnKind::Resnet18 => &[2, 2, 2, 2],
            CnnKind::Resnet50 => &[3, 4, 6, 3],
            CnnKind::Resnet101 => &[3, 4, 23, 3],
            CnnKind::InceptionV3 => &[3, 5, 2],
        }
    }
}

/// Stem convolution (stride 2), then stages; every stage after the first opens
/// with a stride-2 reduction, so the map shrinks by `2^stages` overall.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnBackbone {
    stem: ConvUnit,
    stages: Vec<(Option<ConvUnit>, Vec<Block>)>,
    pub channels: usize,
}

impl CnnBackbone {
    pub fn new(store: &mut ParamStore, kind: CnnKind, channels: usize, rng: &mut impl Rng) -> Self {
        let c = channels;
        let stem = ConvUnit::new(store, "backbone.stem", 3, c, 3, 2, rng);
        let mut stages = Vec::new();
        for (s, &count) in kind.blocks_per_stage().iter().enumerate() {
            let reduction = (s > 0 && kind == CnnKind::InceptionV3)
                .then(|| ConvUnit::new(store, &format!("backbone.stage{s}.reduce"), c, c, 3, 2, rng));
            let mut blocks = Vec::new();
            for b in 0..count {
                let name = format!("backbone.stage{s}.block{b}");
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let block = match kind {
                    CnnKind::Resnet18 => Block::Basic {
                        a: ConvUnit::new(store, &format!("{name}.a"), c, c, 3, stride, rng),
                        b: ConvUnit::new(store, &format!("{name}.b"), c, c, 3, 1, rng),
                        shortcut: (stride > 1).then(|| ConvUnit::new(store, &format!("{name}.skip"), c, c, 1, stride, rng)),
                    },
                    CnnKind::Resnet50 | CnnKind::Resnet101 => {
                        let inner = (c / 4).max(1);
                        Block::Bottleneck {
                            reduce: ConvUnit::new(store, &format!("{name}.reduce"), c, inner, 1, 1, rng),
                            mid: ConvUnit::new(store, &format!("{name}.mid"), inner, inner, 3, stride, rng),
                            expand: ConvUnit::new(store, &format!("{name}.expand"), inner, c, 1, 1, rng),
                            shortcut: (stride > 1)
                                .then(|| ConvUnit::new(store, &format!("{name}.skip"), c, c, 1, stride, rng)),
                        }
                    }
                    CnnKind::InceptionV3 => {
                        let branch = (c / 2).max(1);
                        Block::Inception {
                            single: ConvUnit::new(store, &format!("{name}.b1"), c, branch, 1, 1, rng),
                            double: [
                                ConvUnit::new(store, &format!("{name}.b2a"), c, branch, 1, 1, rng),
                                ConvUnit::new(store, &format!("{name}.b2b"), branch, branch, 3, 1, rng),
                            ],
                            triple: [
                                ConvUnit::new(store, &format!("{name}.b3a"), c, branch, 1, 1, rng),
                                ConvUnit::new(store, &format!("{name}.b3b"), branch, branch, 3, 1, rng),
                                ConvUnit::new(store, &format!("{name}.b3c"), branch, branch, 3, 1, rng),
                            ],
                            merge: ConvUnit::new(store, &format!("{name}.merge"), 3 * branch, c, 1, 1, rng),
                        }
                    }
                };
                blocks.push(block);
            }
            stages.push((reduction, blocks));
        }
        Self { stem, stages, channels }
    }

    /// Side of the final feature map for a square input.
    pub fn out_side(kind: CnnKind, side: usize) -> usize {
        let halve = |s: usize| s.div_ceil(2);
        let mut s = halve(side);
        for _ in 1..kind.blocks_per_stage().len() {
            s = halve(s);
        }
        s
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, side: usize) -> (Var, usize, usize) {
        let (mut y, mut h, mut w) = self.stem.forward(g, store, x, side, side, true);
        for (reduction, blocks) in &self.stages {
            if let Some(r) = reduction {
                (y, h, w) = r.forward(g, store, y, h, w, true);
            }
            for b in blocks {
                (y, h, w) = b.forward(g, store, y, h, w);
            }
        }
        (y, h, w)
    }
}
