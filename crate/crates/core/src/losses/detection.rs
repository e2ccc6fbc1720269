use super::embedding::{focal_term, FocalParams};
use crate::netcore::{Targets, BOX_RAW_CLAMP};
use crate::{Error, Result};

/// Dense head outputs of one frame in location-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionInput {
    /// `L × K` classification logits.
    pub cls_logits: Vec<f64>,
    /// `L × 4` raw box regressions; distances are `stride · exp(raw)`.
    pub box_raw: Vec<f64>,
    pub num_categories: usize,
    /// Stride of each location.
    pub strides: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionLoss {
    pub classification: f64,
    pub regression: f64,
    pub total: f64,
    pub d_cls: Vec<f64>,
    pub d_box: Vec<f64>,
}

/// `−ln IoU` between two boxes given as distances from a shared point,
/// with the gradient with respect to the predicted distances.
pub fn ltrb_iou_loss(pred: [f64; 4], target: [f64; 4]) -> (f64, [f64; 4]) {
    let area_p = (pred[0] + pred[2]) * (pred[1] + pred[3]);
    let area_t = (target[0] + target[2]) * (target[1] + target[3]);
    let wi = pred[0].min(target[0]) + pred[2].min(target[2]);
    let hi = pred[1].min(target[1]) + pred[3].min(target[3]);
    let inter = wi * hi;
    let union = area_p + area_t - inter;
    let loss = union.ln() - inter.ln();
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let horizontal = k % 2 == 0;
        let d_area = if horizontal { pred[1] + pred[3] } else { pred[0] + pred[2] };
        let d_inter = if pred[k] < target[k] {
            if horizontal {
                hi
            } else {
                wi
            }
        } else {
            0.0
        };
        grad[k] = (d_area - d_inter) / union - d_inter / inter;
    }
    (loss, grad)
}

/// Sigmoid focal classification over all locations plus `−ln IoU` over
/// positive locations, both normalized by the positive count.
pub fn detection_loss(input: &DetectionInput, targets: &Targets, fp: &FocalParams) -> Result<DetectionLoss> {
    let k = input.num_categories;
    let n_loc = targets.class_of.len();
    if input.cls_logits.len() != n_loc * k || input.box_raw.len() != n_loc * 4 || input.strides.len() != n_loc {
        return Err(Error::ShapeMismatch(format!(
            "detection input does not match {n_loc} locations x {k} categories"
        )));
    }
    let norm = targets.positives.len().max(1) as f64;
    let mut d_cls = vec![0.0; input.cls_logits.len()];
    let mut classification = 0.0;
    for (loc, class) in targets.class_of.iter().enumerate() {
        for c in 0..k {
            let i = loc * k + c;
            let (l, dz) = focal_term(input.cls_logits[i], *class == Some(c), fp);
            classification += l;
            d_cls[i] = dz / norm;
        }
    }
    classification /= norm;

    let mut d_box = vec![0.0; input.box_raw.len()];
    let mut regression = 0.0;
    for p in &targets.positives {
        let stride = input.strides[p.location] as f64;
        let raw: [f64; 4] = std::array::from_fn(|j| input.box_raw[p.location * 4 + j]);
        let dist = raw.map(|r| stride * r.clamp(-BOX_RAW_CLAMP, BOX_RAW_CLAMP).exp());
        let (l, g) = ltrb_iou_loss(dist, p.ltrb);
        regression += l;
        for j in 0..4 {
            let inside = raw[j].abs() < BOX_RAW_CLAMP;
            d_box[p.location * 4 + j] = if inside { g[j] * dist[j] / norm } else { 0.0 };
        }
    }
    regression /= norm;
    Ok(DetectionLoss {
        classification,
        regression,
        total: classification + regression,
        d_cls,
        d_box,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::netcore::Positive;

    fn one_positive() -> (DetectionInput, Targets) {
        let targets = Targets {
            class_of: vec![None, Some(1), None],
            positives: vec![Positive {
                location: 1,
                annotation: 0,
                category: 1,
                identity: 0,
                bbox: BBox::new(0.0, 0.0, 8.0, 8.0),
                ltrb: [4.0, 4.0, 4.0, 4.0],
            }],
        };
        let mut cls = vec![-20.0; 6];
        cls[3] = 20.0;
        let input = DetectionInput {
            cls_logits: cls,
            box_raw: vec![0.0; 12],
            num_categories: 2,
            strides: vec![4; 3],
        };
        (input, targets)
    }

    #[test]
    fn perfect_prediction_is_nearly_free() {
        let (input, targets) = one_positive();
        let l = detection_loss(&input, &targets, &FocalParams::default()).unwrap();
        assert!(l.total < 1e-6, "{}", l.total);
        assert!(l.regression.abs() < 1e-12);
    }

    #[test]
    fn zero_positives_have_no_box_term() {
        let (mut input, _) = one_positive();
        input.box_raw.iter_mut().for_each(|v| *v = 1.3);
        let targets = Targets {
            class_of: vec![None; 3],
            positives: vec![],
        };
        let l = detection_loss(&input, &targets, &FocalParams::default()).unwrap();
        assert_eq!(l.regression, 0.0);
        assert!(l.d_box.iter().all(|&v| v == 0.0));
        assert!(l.classification > 0.0);
    }

    #[test]
    fn iou_loss_zero_on_match() {
        let (l, _) = ltrb_iou_loss([1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0]);
        assert!(l.abs() < 1e-15);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let (mut input, targets) = one_positive();
        input.box_raw.pop();
        assert!(detection_loss(&input, &targets, &FocalParams::default()).is_err());
    }
}
