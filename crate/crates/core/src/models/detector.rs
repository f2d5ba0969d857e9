//! Single-scale peak detector: a small residual backbone with a total stride
//! of 8 feeding one 52x52 detection layer with three square anchors.

use serde::{Deserialize, Serialize};
use tch::{nn, Device, Kind, Tensor};

use super::{seeded_init, Activation, ConvLayer, ConvSpec, Network, Norm};
use crate::encoding::{nearest_source_index, DETECTOR_INPUT, DETECTOR_SCALE, TRANSLATION_SIDE};

/// Per-anchor outputs: `tx, ty, tw, th, objectness, class`.
pub const HEAD_FIELDS: usize = 6;
const NOOBJ_SCALE: f64 = 100.0;
const IGNORE_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorHeadSpec {
    pub grid: usize,
    /// Square anchor sides in 416-space pixels.
    pub anchors: [f64; 3],
    pub classes: usize,
}

impl Default for DetectorHeadSpec {
    fn default() -> Self {
        Self {
            grid: 52,
            anchors: [15.0, 25.0, 35.0],
            classes: 1,
        }
    }
}

impl DetectorHeadSpec {
    /// 416-space pixels per grid cell.
    pub fn stride(&self) -> f64 {
        DETECTOR_INPUT as f64 / self.grid as f64
    }

    pub fn num_boxes(&self) -> usize {
        self.grid * self.grid * self.anchors.len()
    }

    pub fn head_channels(&self) -> i64 {
        (self.anchors.len() * (5 + self.classes)) as i64
    }
}

/// Ground-truth box in 100-space pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl GroundTruthBox {
    /// The 5x5 box the detector is trained to place on every transmitter.
    pub fn peak(cx: f64, cy: f64) -> Self {
        Self { cx, cy, w: 5.0, h: 5.0 }
    }
}

/// IoU of two boxes sharing a center.
pub fn anchor_iou(w: f64, h: f64, aw: f64, ah: f64) -> f64 {
    let inter = w.min(aw) * h.min(ah);
    inter / (w * h + aw * ah - inter)
}

pub fn best_anchor(w: f64, h: f64, anchors: &[f64]) -> usize {
    anchors
        .iter()
        .enumerate()
        .map(|(i, &a)| (i, anchor_iou(w, h, a, a)))
        .fold((0, f64::MIN), |best, cur| if cur.1 > best.1 { cur } else { best })
        .0
}

const fn cbl(i: i64, o: i64, k: i64, s: i64) -> ConvSpec {
    ConvSpec::new(i, o, k, s, k / 2).norm(Norm::Batch).act(Activation::Leaky)
}

enum Stage {
    Conv(ConvLayer),
    Residual(ConvLayer, ConvLayer),
}

/// Backbone stages; a residual block is a 1x1 reduction followed by a 3x3
/// expansion added back to its input. The 208x208 stage is a single conv:
/// narrow layers at that resolution dominate the cost while adding little.
const BACKBONE: [(ConvSpec, Option<ConvSpec>); 7] = [
    (cbl(3, 8, 3, 2), None),
    (cbl(8, 16, 3, 2), None),
    (cbl(16, 8, 1, 1), Some(cbl(8, 16, 3, 1))),
    (cbl(16, 8, 1, 1), Some(cbl(8, 16, 3, 1))),
    (cbl(16, 32, 3, 2), None),
    (cbl(32, 16, 1, 1), Some(cbl(16, 32, 3, 1))),
    (cbl(32, 16, 1, 1), Some(cbl(16, 32, 3, 1))),
];

pub struct Detector {
    vs: nn::VarStore,
    stages: Vec<Stage>,
    head: nn::Conv2D,
    spec: DetectorHeadSpec,
    resize_index: Tensor,
}

impl Detector {
    pub fn new(seed: u64) -> Self {
        let vs = nn::VarStore::new(Device::Cpu);
        let spec = DetectorHeadSpec::default();
        let root = vs.root() / "detector";
        let stages = BACKBONE
            .iter()
            .enumerate()
            .map(|(i, (first, second))| {
                let p = &root / format!("stage{i}");
                let a = ConvLayer::new(&(&p / "a"), *first);
                match second {
                    None => Stage::Conv(a),
                    Some(b) => Stage::Residual(a, ConvLayer::new(&(&p / "b"), *b)),
                }
            })
            .collect();
        let head = nn::conv2d(&root / "head" / "conv", 32, spec.head_channels(), 1, Default::default());
        seeded_init(&vs, seed);
        let index: Vec<i64> = (0..DETECTOR_INPUT)
            .map(|d| nearest_source_index(d, TRANSLATION_SIDE, DETECTOR_INPUT) as i64)
            .collect();
        Self {
            vs,
            stages,
            head,
            spec,
            resize_index: Tensor::from_slice(&index),
        }
    }

    pub fn head_spec(&self) -> &DetectorHeadSpec {
        &self.spec
    }

    /// Every conv in forward order (the two convs of a residual block are
    /// listed in sequence), followed by the 1x1 head.
    pub fn conv_plan(&self) -> Vec<ConvSpec> {
        let mut plan: Vec<ConvSpec> = BACKBONE
            .iter()
            .flat_map(|(a, b)| std::iter::once(*a).chain(*b))
            .collect();
        plan.push(ConvSpec::new(32, self.spec.head_channels(), 1, 1, 0));
        plan
    }

    /// `[N, 1, 100, 100]` translation output to `[N, 3, 416, 416]` detector
    /// input: channel triplication and nearest-neighbor resize.
    pub fn preprocess(&self, images: &Tensor) -> Tensor {
        images
            .index_select(2, &self.resize_index)
            .index_select(3, &self.resize_index)
            .repeat([1, 3, 1, 1])
    }

    /// Raw head output reshaped to `[N, grid, grid, anchors, 6]`, grid axes
    /// ordered like the image axes.
    pub fn raw_head(&self, x: &Tensor, train: bool) -> Tensor {
        let mut h = x.shallow_clone();
        for stage in &self.stages {
            h = match stage {
                Stage::Conv(c) => c.forward(&h, train, true),
                Stage::Residual(a, b) => &h + b.forward(&a.forward(&h, train, true), train, true),
            };
        }
        let out = h.apply(&self.head);
        let (n, g) = (out.size()[0], self.spec.grid as i64);
        out.view([n, self.spec.anchors.len() as i64, HEAD_FIELDS as i64, g, g])
            .permute([0, 3, 4, 1, 2])
            .contiguous()
    }
}

impl Network for Detector {
    fn name(&self) -> &'static str {
        "detector"
    }

    fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    fn var_store_mut(&mut self) -> &mut nn::VarStore {
        &mut self.vs
    }

    fn input_shape(&self) -> [i64; 3] {
        [3, DETECTOR_INPUT as i64, DETECTOR_INPUT as i64]
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Tensor {
        self.raw_head(x, train)
    }
}

/// Standard single-scale detection loss: MSE on box offsets and log sizes
/// for assigned anchors, BCE on objectness (assigned vs. background) and on
/// the class score. Each box is assigned to the best-IoU anchor at the cell
/// containing its center; other anchors there whose IoU exceeds 0.5 are not
/// penalized as background.
pub fn detector_loss(head: &Tensor, targets: &[Vec<GroundTruthBox>], spec: &DetectorHeadSpec) -> Tensor {
    let n = targets.len();
    let g = spec.grid;
    let na = spec.anchors.len();
    let cells = n * g * g * na;
    let mut obj = vec![0f32; cells];
    let mut noobj = vec![1f32; cells];
    let mut target = vec![0f32; cells * 4];
    let stride = spec.stride();
    for (b, boxes) in targets.iter().enumerate() {
        for gt in boxes {
            let (cx, cy) = (gt.cx * DETECTOR_SCALE, gt.cy * DETECTOR_SCALE);
            let (w, h) = (gt.w * DETECTOR_SCALE, gt.h * DETECTOR_SCALE);
            let gx = ((cx / stride).floor() as usize).min(g - 1);
            let gy = ((cy / stride).floor() as usize).min(g - 1);
            let base = ((b * g + gx) * g + gy) * na;
            for (a, &side) in spec.anchors.iter().enumerate() {
                if anchor_iou(w, h, side, side) > IGNORE_IOU {
                    noobj[base + a] = 0.0;
                }
            }
            let a = best_anchor(w, h, &spec.anchors);
            obj[base + a] = 1.0;
            noobj[base + a] = 0.0;
            let t = &mut target[(base + a) * 4..(base + a) * 4 + 4];
            t[0] = (cx / stride - gx as f64) as f32;
            t[1] = (cy / stride - gy as f64) as f32;
            t[2] = (w / spec.anchors[a]).ln() as f32;
            t[3] = (h / spec.anchors[a]).ln() as f32;
        }
    }
    let shape = [n as i64, g as i64, g as i64, na as i64];
    let obj = Tensor::from_slice(&obj).view(shape);
    let noobj = Tensor::from_slice(&noobj).view(shape);
    let target = Tensor::from_slice(&target).view([n as i64, g as i64, g as i64, na as i64, 4]);

    let n_obj = obj.sum(Kind::Float).double_value(&[]);
    let n_noobj = noobj.sum(Kind::Float).double_value(&[]).max(1.0);
    let field = |i: i64| head.select(4, i);
    let bce = |logits: &Tensor, value: f64| {
        logits.binary_cross_entropy_with_logits::<Tensor>(
            &logits.full_like(value),
            None,
            None,
            tch::Reduction::None,
        )
    };

    let mut loss = (bce(&field(4), 0.0) * &noobj).sum(Kind::Float) * (NOOBJ_SCALE / n_noobj);
    if n_obj > 0.0 {
        let offsets = Tensor::stack(&[field(0).sigmoid(), field(1).sigmoid()], -1);
        let sizes = Tensor::stack(&[field(2), field(3)], -1);
        let box_err = (offsets - target.narrow(4, 0, 2)).square().sum_dim_intlist(-1, false, Kind::Float)
            + (sizes - target.narrow(4, 2, 2)).square().sum_dim_intlist(-1, false, Kind::Float);
        let positive = (box_err + bce(&field(4), 1.0) + bce(&field(5), 1.0)) * &obj;
        loss = loss + positive.sum(Kind::Float) / n_obj;
    }
    loss
}
