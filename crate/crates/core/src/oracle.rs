//! Ground-truth substitution: replaces boxes, categories, masks or track
//! identities of predictions with their matched ground truth to attribute
//! error to each stage.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::track_iou;
use crate::pipeline::{Detection, InstanceTrack};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleFlags {
    #[serde(rename = "box")]
    pub bbox: bool,
    pub class: bool,
    pub mask: bool,
    pub track: bool,
}

impl OracleFlags {
    pub const ALL: OracleFlags = OracleFlags {
        bbox: true,
        class: true,
        mask: true,
        track: true,
    };

    /// Cumulative rows: none, +box, +class, +mask, +track.
    pub fn ladder() -> [(&'static str, OracleFlags); 5] {
        let none = OracleFlags::default();
        let b = OracleFlags { bbox: true, ..none };
        let c = OracleFlags { class: true, ..b };
        let m = OracleFlags { mask: true, ..c };
        [("none", none), ("+box", b), ("+class", c), ("+mask", m), ("+track", OracleFlags::ALL)]
    }

    /// Cumulative prefix of the ladder up to and including the last set flag.
    pub fn ladder_until(self) -> Vec<(&'static str, OracleFlags)> {
        let last = [self.bbox, self.class, self.mask, self.track]
            .iter()
            .rposition(|&f| f)
            .map_or(0, |i| i + 1);
        Self::ladder()[..=last].to_vec()
    }
}

impl FromStr for OracleFlags {
    type Err = Error;

    /// Comma-separated subset of `box,class,mask,track`; empty or `none`
    /// for no flags.
    fn from_str(s: &str) -> Result<Self> {
        let mut f = OracleFlags::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "box" => f.bbox = true,
                "class" => f.class = true,
                "mask" => f.mask = true,
                "track" => f.track = true,
                "none" => {}
                other => return Err(Error::Input(format!("unknown oracle flag {other:?}"))),
            }
        }
        Ok(f)
    }
}

impl fmt::Display for OracleFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.bbox, "box"),
            (self.class, "class"),
            (self.mask, "mask"),
            (self.track, "track"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|&(_, n)| n)
        .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

/// Ground-truth track with the highest track IoU, if any overlaps.
fn best_gt(pred: &InstanceTrack, gts: &[InstanceTrack]) -> Result<Option<(usize, f64)>> {
    let mut best: Option<(usize, f64)> = None;
    for (j, g) in gts.iter().enumerate() {
        let v = track_iou(pred, g)?;
        if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    Ok(best)
}

/// Applies the requested substitutions to one video's predictions. The
/// matched ground truth of each prediction is fixed from the unmodified
/// input; predictions with no overlapping ground truth are left as is.
pub fn oracle_substitute(
    preds: &[InstanceTrack],
    gts: &[InstanceTrack],
    flags: OracleFlags,
) -> Result<Vec<InstanceTrack>> {
    let matched: Vec<Option<(usize, f64)>> =
        preds.iter().map(|p| best_gt(p, gts)).collect::<Result<_>>()?;
    let mut out: Vec<InstanceTrack> = preds.to_vec();

    if flags.bbox {
        for p in &mut out {
            for (t, det) in p.entries.iter_mut() {
                let closest = gts
                    .iter()
                    .filter_map(|g| g.entries.get(t))
                    .map(|g| (det.bbox.iou(&g.bbox), g.bbox))
                    .filter(|(v, _)| *v > 0.0)
                    .fold(None::<(f64, _)>, |acc, c| match acc {
                        Some(a) if a.0 >= c.0 => Some(a),
                        _ => Some(c),
                    });
                if let Some((_, b)) = closest {
                    det.bbox = b;
                }
            }
        }
    }

    if flags.class {
        for (p, m) in out.iter_mut().zip(&matched) {
            if let Some((j, _)) = *m {
                p.category = gts[j].category;
                p.entries.values_mut().for_each(|d| d.category = gts[j].category);
            }
        }
    }

    if flags.mask {
        for (p, m) in out.iter_mut().zip(&matched) {
            if let Some((j, _)) = *m {
                let g = &gts[j];
                let entries = std::mem::take(&mut p.entries);
                p.entries = entries
                    .into_iter()
                    .filter_map(|(t, det)| {
                        let truth = g.entries.get(&t)?;
                        Some((
                            t,
                            Detection {
                                mask: truth.mask.clone(),
                                bbox: truth.bbox,
                                ..det
                            },
                        ))
                    })
                    .collect();
            }
        }
    }

    if flags.track {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut merged = Vec::new();
        for (i, m) in matched.iter().enumerate() {
            match m {
                Some((j, _)) => groups.entry(*j).or_default().push(i),
                None => merged.push(out[i].clone()),
            }
        }
        for (j, mut members) in groups {
            // best member first: higher IoU, then lower index
            members.sort_by(|&a, &b| {
                let (ia, ib) = (matched[a].unwrap().1, matched[b].unwrap().1);
                ib.total_cmp(&ia).then(a.cmp(&b))
            });
            let lead = &out[members[0]];
            let confidence = members
                .iter()
                .map(|&i| out[i].confidence)
                .fold(f64::NEG_INFINITY, f64::max);
            let category = if flags.class { gts[j].category } else { lead.category };
            let mut entries = BTreeMap::new();
            if flags.mask {
                for (&t, truth) in &gts[j].entries {
                    let source = members
                        .iter()
                        .find_map(|&i| out[i].entries.get(&t))
                        .map_or(crate::pipeline::Source::Detector, |d| d.source);
                    entries.insert(
                        t,
                        Detection {
                            category,
                            score: confidence,
                            source,
                            ..truth.clone()
                        },
                    );
                }
            } else {
                for &i in &members {
                    for (&t, det) in &out[i].entries {
                        entries.entry(t).or_insert_with(|| Detection {
                            category,
                            ..det.clone()
                        });
                    }
                }
            }
            merged.push(InstanceTrack::from_entries(lead.track_id, category, confidence, entries));
        }
        merged.sort_by_key(|t| t.track_id);
        out = merged;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::BoundingBox;
    use crate::eval::{evaluate, EvalConfig};
    use crate::grid::BinaryMask;
    use crate::pipeline::Source;

    fn track(id: u64, cat: u32, conf: f64, frames: &[(usize, std::ops::Range<usize>)]) -> InstanceTrack {
        let entries = frames
            .iter()
            .map(|(t, cols)| {
                let mask = BinaryMask::from_fn(6, 12, |r, c| r < 4 && cols.contains(&c));
                (
                    *t,
                    Detection {
                        frame: *t,
                        bbox: BoundingBox::from_mask(&mask).unwrap(),
                        mask,
                        category: cat,
                        score: conf,
                        source: Source::Detector,
                    },
                )
            })
            .collect();
        InstanceTrack::from_entries(id, cat, conf, entries)
    }

    fn scenario() -> (Vec<InstanceTrack>, Vec<InstanceTrack>) {
        let gts = vec![
            track(1, 1, 1.0, &[(0, 0..4), (1, 0..4), (2, 0..4), (3, 0..4)]),
            track(2, 2, 1.0, &[(0, 6..11), (1, 6..11), (2, 6..11), (3, 6..11)]),
        ];
        let preds = vec![
            // fragmented and eroded
            track(10, 1, 0.9, &[(0, 1..4), (1, 1..4)]),
            track(11, 1, 0.6, &[(2, 0..3), (3, 0..3)]),
            // wrong class
            track(12, 1, 0.8, &[(0, 6..10), (1, 6..10), (2, 6..10)]),
        ];
        (preds, gts)
    }

    #[test]
    fn flags_parse_and_print() {
        let f: OracleFlags = "box,mask".parse().unwrap();
        assert_eq!(f.to_string(), "box,mask");
        assert_eq!("".parse::<OracleFlags>().unwrap(), OracleFlags::default());
        assert!("colour".parse::<OracleFlags>().is_err());
        assert_eq!(OracleFlags::ALL.ladder_until().len(), 5);
        assert_eq!(OracleFlags::default().ladder_until().len(), 1);
    }

    #[test]
    fn no_flags_is_identity() {
        let (preds, gts) = scenario();
        assert_eq!(oracle_substitute(&preds, &gts, OracleFlags::default()).unwrap(), preds);
    }

    #[test]
    fn all_flags_reach_100() {
        let (preds, gts) = scenario();
        let fixed = oracle_substitute(&preds, &gts, OracleFlags::ALL).unwrap();
        let r = evaluate(&[fixed], &[gts], &[1, 2], &EvalConfig::default()).unwrap();
        assert_eq!(r.map, 100.0);
    }

    #[test]
    fn ladder_is_monotone_on_scenario() {
        let (preds, gts) = scenario();
        let mut last = f64::NEG_INFINITY;
        for (_, flags) in OracleFlags::ladder() {
            let p = oracle_substitute(&preds, &gts, flags).unwrap();
            let r = evaluate(&[p], &[gts.clone()], &[1, 2], &EvalConfig::default()).unwrap();
            assert!(r.map >= last, "{flags}: {} < {last}", r.map);
            last = r.map;
        }
        assert_eq!(last, 100.0);
    }

    #[test]
    fn class_flag_takes_best_gt_category() {
        let (preds, gts) = scenario();
        let p = oracle_substitute(&preds, &gts, "class".parse().unwrap()).unwrap();
        assert_eq!(p[2].category, 2);
        assert!(p[2].entries.values().all(|d| d.category == 2));
        assert_eq!(p[0].category, 1);
    }

    #[test]
    fn box_flag_changes_boxes_only() {
        let (preds, gts) = scenario();
        let p = oracle_substitute(&preds, &gts, "box".parse().unwrap()).unwrap();
        assert_eq!(p[0].entries[&0].bbox, gts[0].entries[&0].bbox);
        assert_eq!(p[0].entries[&0].mask, preds[0].entries[&0].mask);
    }

    #[test]
    fn prediction_without_overlap_is_untouched() {
        let (_, gts) = scenario();
        let stray = vec![track(20, 1, 0.5, &[(0, 4..6)])];
        let p = oracle_substitute(&stray, &gts, OracleFlags::ALL).unwrap();
        assert_eq!(p, stray);
    }
}
