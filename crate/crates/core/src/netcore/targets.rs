use super::model::{Location, STRIDES};
use crate::geometry::BBox;
use crate::syndata::{BinaryMask, InstanceAnnotation};

/// Box side (in strides) that each pyramid level is responsible for.
const LEVEL_SCALE: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Positive {
    /// Index into the location list.
    pub location: usize,
    /// Index into the frame's annotation list.
    pub annotation: usize,
    pub category: usize,
    pub identity: usize,
    pub bbox: BBox,
    /// Distances from the location to the left, top, right and bottom box edges.
    pub ltrb: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// Category of each location, `None` for negatives.
    pub class_of: Vec<Option<usize>>,
    pub positives: Vec<Positive>,
}

fn preferred_level(bbox: &BBox) -> usize {
    let scale = bbox.area().sqrt().max(1.0);
    (0..STRIDES.len())
        .min_by(|&a, &b| {
            let da = (scale / (LEVEL_SCALE * STRIDES[a] as f64)).ln().abs();
            let db = (scale / (LEVEL_SCALE * STRIDES[b] as f64)).ln().abs();
            da.total_cmp(&db)
        })
        .expect("at least one level")
}

/// One positive location per instance: the free cell nearest the box center
/// on the level matching the box scale. Larger boxes choose first.
pub fn assign_targets(annotations: &[InstanceAnnotation], locations: &[Location]) -> Targets {
    let mut class_of = vec![None; locations.len()];
    let mut order: Vec<usize> = (0..annotations.len()).collect();
    order.sort_by(|&a, &b| annotations[b].bbox.area().total_cmp(&annotations[a].bbox.area()).then(a.cmp(&b)));

    let mut positives = Vec::with_capacity(annotations.len());
    for ai in order {
        let ann = &annotations[ai];
        let level = preferred_level(&ann.bbox);
        let (cx, cy) = ann.bbox.center();
        let chosen = locations
            .iter()
            .enumerate()
            .filter(|(i, l)| l.level == level && class_of[*i].is_none())
            .min_by(|(ia, a), (ib, b)| {
                let da = (a.x - cx).powi(2) + (a.y - cy).powi(2);
                let db = (b.x - cx).powi(2) + (b.y - cy).powi(2);
                da.total_cmp(&db).then(ia.cmp(ib))
            })
            .map(|(i, _)| i);
        let Some(li) = chosen else { continue };
        let loc = &locations[li];
        class_of[li] = Some(ann.category);
        let b = &ann.bbox;
        positives.push(Positive {
            location: li,
            annotation: ai,
            category: ann.category,
            identity: ann.identity,
            bbox: *b,
            ltrb: [
                (loc.x - b.x0).max(0.5),
                (loc.y - b.y0).max(0.5),
                (b.x1 - loc.x).max(0.5),
                (b.y1 - loc.y).max(0.5),
            ],
        });
    }
    positives.sort_by_key(|p| p.annotation);
    Targets { class_of, positives }
}

/// Binary ground truth on the `stride`-subsampled grid: a cell is foreground
/// when at least half of its pixels are.
pub fn downsample_mask(mask: &BinaryMask, stride: usize) -> Vec<f64> {
    let (h, w) = (mask.height / stride, mask.width / stride);
    let mut out = vec![0.0; h * w];
    let area = stride * stride;
    for gy in 0..h {
        for gx in 0..w {
            let mut count = 0;
            for y in gy * stride..(gy + 1) * stride {
                for x in gx * stride..(gx + 1) * stride {
                    count += mask.get(y, x) as usize;
                }
            }
            if 2 * count >= area {
                out[gy * w + gx] = 1.0;
            }
        }
    }
    out
}
