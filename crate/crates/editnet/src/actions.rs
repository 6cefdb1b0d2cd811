//! Keyword actions applied to segmentation maps.

use segedit_core::image::{scale_mask_about_centroid, MaskMap, SegMap};
use segedit_core::instruction::Action;
use segedit_core::{Error, Result};

/// Applies `action` to the whole `target_class` region of `seg`.
pub fn apply_action_to_segmap(seg: &SegMap, target_class: u32, action: &Action) -> Result<SegMap> {
    apply_action_to_region(seg, target_class, &seg.mask_of(target_class), action)
}

/// Applies `action` to `region`, the part of `target_class` being edited.
///
/// Attribute and background edits leave the map unchanged. Resize clears
/// `region` and writes `target_class` on the region scaled about its
/// centroid, overwriting whatever class was there. Remove sets the region
/// to background.
pub fn apply_action_to_region(seg: &SegMap, target_class: u32, region: &MaskMap, action: &Action) -> Result<SegMap> {
    if region.dims() != seg.dims() {
        return Err(Error::Shape(format!("region {:?} vs seg {:?}", region.dims(), seg.dims())));
    }
    let (h, w) = seg.dims();
    let mut out = seg.clone();
    match action {
        Action::Attribute | Action::BackgroundSwap => {}
        Action::Remove => {
            for y in 0..h {
                for x in 0..w {
                    if region.get(y, x) && seg.get(y, x) == target_class {
                        out.set(y, x, 0);
                    }
                }
            }
        }
        Action::Resize { factor } => {
            if region.is_empty() {
                return Err(Error::EmptyRegion(format!("class {target_class} has no pixels to resize")));
            }
            let scaled = scale_mask_about_centroid(region, *factor)?;
            for y in 0..h {
                for x in 0..w {
                    if scaled.get(y, x) {
                        out.set(y, x, target_class);
                    } else if region.get(y, x) {
                        out.set(y, x, 0);
                    }
                }
            }
        }
    }
    Ok(out)
}
