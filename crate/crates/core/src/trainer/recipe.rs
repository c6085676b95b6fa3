use super::{PhaseConfig, Result, TrainError};
use crate::losses::TripletKind;
use crate::model::{Pairing, ShareMode};

pub const RECIPE_TABLE: &str = "\
scheme      pairing         phases      triplet loss
full_share  sketch_edgemap  3 [4]       standard
half_share  sketch_edgemap  1 2 3 [4]   modified
half_share  sketch_photo    1 2 3 [4]   modified
no_share    any             1 3 [4]     standard or modified";

fn reject(msg: String) -> TrainError {
    TrainError::Recipe {
        msg,
        table: RECIPE_TABLE.to_string(),
    }
}

/// Checks a phase sequence against the training recipes, returning
/// warnings for sequences that are allowed but discouraged.
pub fn check_recipe(mode: ShareMode, pairing: Pairing, phases: &[PhaseConfig]) -> Result<Vec<String>> {
    for p in phases {
        p.validate()?;
    }
    let ids: Vec<u8> = phases.iter().map(|p| p.phase).collect();
    if ids.is_empty() {
        return Err(reject("no phases given".into()));
    }
    if ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(reject(format!("phases must run in increasing order, got {ids:?}")));
    }
    if !ids.iter().any(|&p| p >= 3) {
        return Err(reject(format!("{ids:?} never trains the embedding with a triplet phase")));
    }
    let mut warnings = Vec::new();
    match mode {
        ShareMode::FullShare => {
            if ids.iter().any(|&p| p < 3) {
                return Err(reject(format!(
                    "full_share trains in a single triplet step; phases {ids:?} include classification"
                )));
            }
        }
        ShareMode::NoShare => {
            if ids.contains(&2) {
                return Err(reject("phase 2 trains shared layers and is only valid for half_share".into()));
            }
            if !ids.contains(&1) {
                warnings.push("no_share is normally pre-trained with a softmax phase 1".to_string());
            }
        }
        ShareMode::HalfShare => {
            if ids.contains(&2) && !ids.contains(&1) {
                return Err(reject("phase 2 freezes layers learnt in phase 1, which is missing".into()));
            }
            if phases.iter().any(|p| p.uses_triplet() && p.triplet == TripletKind::Standard) {
                warnings.push(format!(
                    "half_share {pairing} with triplet_standard risks vanishing gradients at the \
                     anchor=positive=negative saddle; triplet_modified is recommended"
                ));
            }
        }
    }
    Ok(warnings)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(ids: &[u8], kind: TripletKind) -> Vec<PhaseConfig> {
        ids.iter()
            .map(|&p| PhaseConfig {
                triplet: kind,
                ..PhaseConfig::new(p)
            })
            .collect()
    }

    #[test]
    fn full_share_single_standard_phase_accepted() {
        let w = check_recipe(ShareMode::FullShare, Pairing::SketchEdgemap, &seq(&[3], TripletKind::Standard)).unwrap();
        assert!(w.is_empty());
        assert!(check_recipe(ShareMode::FullShare, Pairing::SketchEdgemap, &seq(&[1, 3], TripletKind::Standard)).is_err());
    }

    #[test]
    fn half_share_standard_warns() {
        let w = check_recipe(ShareMode::HalfShare, Pairing::SketchEdgemap, &seq(&[1, 2, 3], TripletKind::Standard)).unwrap();
        assert_eq!(w.len(), 1);
        assert!(w[0].contains("triplet_modified"));
        let w = check_recipe(ShareMode::HalfShare, Pairing::SketchEdgemap, &seq(&[1, 2, 3], TripletKind::Modified)).unwrap();
        assert!(w.is_empty());
    }

    #[test]
    fn no_share_two_step_only() {
        assert!(check_recipe(ShareMode::NoShare, Pairing::SketchEdgemap, &seq(&[1, 3], TripletKind::Modified)).is_ok());
        match check_recipe(ShareMode::NoShare, Pairing::SketchEdgemap, &seq(&[1, 2, 3], TripletKind::Modified)) {
            Err(TrainError::Recipe { table, .. }) => assert!(table.contains("no_share")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ordering_and_triplet_required() {
        assert!(check_recipe(ShareMode::HalfShare, Pairing::SketchPhoto, &seq(&[3, 1], TripletKind::Modified)).is_err());
        assert!(check_recipe(ShareMode::HalfShare, Pairing::SketchPhoto, &seq(&[1, 2], TripletKind::Modified)).is_err());
        assert!(check_recipe(ShareMode::HalfShare, Pairing::SketchPhoto, &seq(&[2, 3], TripletKind::Modified)).is_err());
    }
}
