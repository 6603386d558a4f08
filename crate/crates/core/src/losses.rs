//! Pretraining objectives: masked-token and image-text matching losses plus
//! the three auxiliary visual losses (masked mean-colour regression,
//! downsampled segmentation, and matched set prediction).

use crate::assignment::{solve_assignment, Assignment, CostMatrix};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::text::IGNORE;
use crate::vision::PatchGrid;

/// Label value for pixels without annotation.
pub const IGNORE_LABEL: u8 = u8::MAX;

/// ITM class index of a matching pair; 1 is a mismatch.
pub const ITM_MATCH: usize = 0;
pub const ITM_MISMATCH: usize = 1;

pub const DEFAULT_EOS_COEF: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegLabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl SegLabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("label map", &[height, width], &[data.len()]));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, class: u8) {
        self.data[r * self.width + c] = class;
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            out.data[r * self.width..(r + 1) * self.width].reverse();
        }
        out
    }

    /// Pixel count per class id (index 255 counts ignore pixels).
    pub fn histogram(&self) -> [usize; 256] {
        let mut h = [0usize; 256];
        for &c in &self.data {
            h[c as usize] += 1;
        }
        h
    }

    /// Row-major targets with ignore pixels mapped to [`IGNORE`].
    pub fn targets(&self) -> Vec<usize> {
        self.data
            .iter()
            .map(|&c| if c == IGNORE_LABEL { IGNORE } else { c as usize })
            .collect()
    }
}

/// Majority class of each source block, ignoring unannotated pixels; ties go
/// to the lowest class id and fully unannotated blocks stay unannotated.
pub fn downsample_labels(y: &SegLabelMap, out_h: usize, out_w: usize) -> Result<SegLabelMap> {
    if out_h == 0 || out_w == 0 || y.height % out_h != 0 || y.width % out_w != 0 {
        return Err(Error::Geometry {
            height: y.height,
            width: y.width,
            divisor: if out_h == 0 || y.height % out_h != 0 { out_h } else { out_w },
        });
    }
    let (bh, bw) = (y.height / out_h, y.width / out_w);
    let mut out = SegLabelMap::filled(out_h, out_w, IGNORE_LABEL);
    let mut counts = [0usize; 256];
    for r in 0..out_h {
        for c in 0..out_w {
            counts.fill(0);
            for yy in r * bh..(r + 1) * bh {
                for xx in c * bw..(c + 1) * bw {
                    counts[y.get(yy, xx) as usize] += 1;
                }
            }
            let mut best = IGNORE_LABEL;
            let mut best_count = 0;
            for class in 0..IGNORE_LABEL {
                if counts[class as usize] > best_count {
                    best_count = counts[class as usize];
                    best = class;
                }
            }
            out.set(r, c, best);
        }
    }
    Ok(out)
}

/// Detector-style class labels padded with the no-object class to the number
/// of prediction slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabelSet {
    labels: Vec<usize>,
    no_object: usize,
}

impl PseudoLabelSet {
    /// `num_classes` real classes; the no-object id is `num_classes`.
    pub fn padded(labels: &[usize], slots: usize, num_classes: usize) -> Result<Self> {
        if labels.len() > slots {
            return Err(Error::Input(format!(
                "{} pseudo-labels do not fit in {slots} prediction slots",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > num_classes) {
            return Err(Error::Index {
                what: "pseudo-label classes",
                index: bad,
                bound: num_classes + 1,
            });
        }
        let mut padded = labels.to_vec();
        padded.resize(slots, num_classes);
        Ok(Self {
            labels: padded,
            no_object: num_classes,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn no_object(&self) -> usize {
        self.no_object
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            labels: order.iter().map(|&i| self.labels[i]).collect(),
            no_object: self.no_object,
        }
    }
}

pub fn mlm_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels, Some(IGNORE))
}

/// Two-way cross-entropy on the [CLS] matching logits.
pub fn itm_loss(tape: &mut Tape, logits: Var, is_match: bool) -> Result<Var> {
    let logits = if tape.shape(logits).len() == 1 {
        let n = tape.shape(logits)[0];
        tape.reshape(logits, &[1, n])?
    } else {
        logits
    };
    let target = if is_match { ITM_MATCH } else { ITM_MISMATCH };
    tape.cross_entropy(logits, &[target], None)
}

/// Squared error of predicted mean colours, averaged over masked patches and
/// channels only.
pub fn ssul_loss(tape: &mut Tape, pred_colors: Var, grid: &PatchGrid) -> Result<Var> {
    tape.mse(pred_colors, &grid.mean_colors, Some(&grid.mask))
}

pub fn segl_loss(tape: &mut Tape, logits: Var, y_down: &SegLabelMap) -> Result<Var> {
    let targets = y_down.targets();
    if tape.shape(logits)[0] != targets.len() {
        return Err(Error::shape(
            "segmentation loss",
            tape.shape(logits),
            &[y_down.height, y_down.width],
        ));
    }
    tape.cross_entropy(logits, &targets, Some(IGNORE))
}

/// Matching cost `costs[i][j] = -softmax(logits_j)[c_i]`.
pub fn matching_costs(logits: &Tensor, labels: &PseudoLabelSet) -> Result<CostMatrix> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::shape("set prediction", &[n, c], &[labels.len()]));
    }
    if labels.no_object + 1 != c {
        return Err(Error::shape("set prediction", &[n, c], &[labels.no_object + 1]));
    }
    let mut probs = logits.data().to_vec();
    crate::tensor::softmax_rows(&mut probs, c);
    let mut costs = Vec::with_capacity(n * n);
    for &class in &labels.labels {
        for j in 0..n {
            costs.push(-probs[j * c + class]);
        }
    }
    CostMatrix::new(n, costs)
}

pub struct SetPredictionLoss {
    pub loss: Var,
    pub assignment: Assignment,
}

/// Optimal matching of predictions to labels, then cross-entropy of each
/// matched slot against its label with no-object rows weighted by
/// `eos_coef`. The matching itself is not differentiated.
pub fn spl_loss(
    tape: &mut Tape,
    pred_logits: Var,
    labels: &PseudoLabelSet,
    eos_coef: f64,
) -> Result<SetPredictionLoss> {
    let costs = matching_costs(tape.value(pred_logits), labels)?;
    let assignment = solve_assignment(&costs);
    let n = labels.len();
    let mut targets = vec![0usize; n];
    let mut weights = vec![0.0; n];
    for (i, &slot) in assignment.sigma.iter().enumerate() {
        let class = labels.labels[i];
        targets[slot] = class;
        weights[slot] = if class == labels.no_object { eos_coef } else { 1.0 };
    }
    let loss = tape.weighted_cross_entropy(pred_logits, &targets, &weights)?;
    Ok(SetPredictionLoss { loss, assignment })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub mlm: f64,
    pub itm: f64,
    pub visual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mlm: 1.0,
            itm: 1.0,
            visual: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("mlm", self.mlm), ("itm", self.itm), ("visual", self.visual)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub mlm: f64,
    pub itm: f64,
    pub visual: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// Weighted sum of the active terms. A missing visual term contributes an
/// exact zero.
pub fn combine(
    tape: &mut Tape,
    mlm: Var,
    itm: Var,
    visual: Option<Var>,
    weights: LossWeights,
) -> Result<(Var, LossBundle)> {
    weights.validate()?;
    let a = tape.scale(mlm, weights.mlm);
    let b = tape.scale(itm, weights.itm);
    let mut total = tape.add(a, b)?;
    if let Some(v) = visual {
        let c = tape.scale(v, weights.visual);
        total = tape.add(total, c)?;
    }
    let bundle = LossBundle {
        mlm: tape.value(mlm).item(),
        itm: tape.value(itm).item(),
        visual: visual.map_or(0.0, |v| tape.value(v).item()),
        total: tape.value(total).item(),
        weights,
    };
    Ok((total, bundle))
}
