use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::Mask;
use crate::error::{check_dim, Error, Result};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.8;
/// Lower edge of the band sent for manual review.
pub const UNCERTAIN_IOU: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterVerdict {
    Accept,
    Uncertain,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleCheck {
    pub iou: f64,
    pub accepted: bool,
}

impl CycleCheck {
    /// Three-way verdict with an uncertain band `[uncertain, threshold)`.
    pub fn verdict(&self, uncertain: f64) -> FilterVerdict {
        if self.accepted {
            FilterVerdict::Accept
        } else if self.iou >= uncertain {
            FilterVerdict::Uncertain
        } else {
            FilterVerdict::Reject
        }
    }
}

/// IoU between the conditioning mask and the mask re-extracted from the
/// generated image; accepted iff `iou >= threshold`.
pub fn cycle_consistency(
    conditioned: &Mask,
    candidate: &Mask,
    threshold: f64,
) -> Result<CycleCheck> {
    check_dim(
        "mask width",
        conditioned.width as usize,
        candidate.width as usize,
    )?;
    check_dim(
        "mask height",
        conditioned.height as usize,
        candidate.height as usize,
    )?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "IoU threshold must be in [0, 1], got {threshold}"
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in conditioned.data.iter().zip(&candidate.data) {
        inter += (*a && *b) as usize;
        union += (*a || *b) as usize;
    }
    if union == 0 {
        return Err(Error::Degenerate(
            "IoU undefined for two empty masks".into(),
        ));
    }
    let iou = inter as f64 / union as f64;
    Ok(CycleCheck {
        iou,
        accepted: iou >= threshold,
    })
}

/// Foreground where the mask is set, background elsewhere.
pub fn composite_background(
    foreground: &RgbImage,
    mask: &Mask,
    background: &RgbImage,
) -> Result<RgbImage> {
    for (what, img) in [("foreground", foreground), ("background", background)] {
        if img.dimensions() != (mask.width, mask.height) {
            return Err(Error::InvalidArgument(format!(
                "{what} is {:?}, mask is {}x{}",
                img.dimensions(),
                mask.width,
                mask.height
            )));
        }
    }
    Ok(RgbImage::from_fn(mask.width, mask.height, |x, y| {
        if mask.get(x, y) {
            *foreground.get_pixel(x, y)
        } else {
            *background.get_pixel(x, y)
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn rect(x0: u32, x1: u32) -> Mask {
        Mask::from_fn(8, 4, |x, _| (x0..x1).contains(&x))
    }

    #[test]
    fn iou_cases() {
        let a = rect(0, 4);
        let c = cycle_consistency(&a, &a, DEFAULT_IOU_THRESHOLD).unwrap();
        assert_eq!((c.iou, c.accepted), (1.0, true));
        let d = cycle_consistency(&a, &rect(4, 8), DEFAULT_IOU_THRESHOLD).unwrap();
        assert_eq!((d.iou, d.accepted), (0.0, false));
        let h = cycle_consistency(&a, &rect(2, 6), DEFAULT_IOU_THRESHOLD).unwrap();
        assert!((h.iou - 1.0 / 3.0).abs() < 1e-15);
        let empty = Mask::new(8, 4);
        assert!(cycle_consistency(&empty, &empty, 0.8).is_err());
        assert!(cycle_consistency(&a, &Mask::new(4, 4), 0.8).is_err());
    }

    #[test]
    fn verdict_bands() {
        let check = |iou: f64| CycleCheck {
            iou,
            accepted: iou >= DEFAULT_IOU_THRESHOLD,
        };
        assert_eq!(check(0.85).verdict(UNCERTAIN_IOU), FilterVerdict::Accept);
        assert_eq!(check(0.7).verdict(UNCERTAIN_IOU), FilterVerdict::Uncertain);
        assert_eq!(check(0.6).verdict(UNCERTAIN_IOU), FilterVerdict::Uncertain);
        assert_eq!(check(0.59).verdict(UNCERTAIN_IOU), FilterVerdict::Reject);
    }

    #[test]
    fn compositing() {
        let fg = RgbImage::from_pixel(4, 4, Rgb([200, 10, 10]));
        let bg = RgbImage::from_fn(4, 4, |x, y| Rgb([x as u8, y as u8, 7]));
        let all = Mask::from_fn(4, 4, |_, _| true);
        assert_eq!(composite_background(&fg, &all, &bg).unwrap(), fg);
        assert_eq!(
            composite_background(&fg, &Mask::new(4, 4), &bg).unwrap(),
            bg
        );
        let checker = Mask::from_fn(4, 4, |x, y| (x + y) % 2 == 0);
        let out = composite_background(&fg, &checker, &bg).unwrap();
        for (x, y, p) in out.enumerate_pixels() {
            let expect = if (x + y) % 2 == 0 {
                fg.get_pixel(x, y)
            } else {
                bg.get_pixel(x, y)
            };
            assert_eq!(p, expect);
        }
        assert!(composite_background(&fg, &Mask::new(3, 4), &bg).is_err());
    }

    proptest! {
        #[test]
        fn raising_threshold_never_accepts_more(
            a in prop::collection::vec(any::<bool>(), 32),
            b in prop::collection::vec(any::<bool>(), 32),
            t1 in 0.0f64..1.0,
            dt in 0.0f64..1.0,
        ) {
            let ma = Mask { width: 8, height: 4, data: a };
            let mb = Mask { width: 8, height: 4, data: b };
            prop_assume!(ma.count() + mb.count() > 0);
            let t2 = (t1 + dt).min(1.0);
            let lo = cycle_consistency(&ma, &mb, t1).unwrap();
            let hi = cycle_consistency(&ma, &mb, t2).unwrap();
            prop_assert!(!hi.accepted || lo.accepted);
        }
    }
}
