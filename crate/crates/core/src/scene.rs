use crate::error::{Error, Result};
use crate::image::{labels_to_masks, BinaryMask, Image, SegLabelMap};

/// One training record: two object images with masks, optionally the composite
/// they form, its label map, and the objects as placed in the composite.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneExample {
    pub x: Image,
    pub y: Image,
    pub mask_x: BinaryMask,
    pub mask_y: BinaryMask,
    pub c: Option<Image>,
    pub c_labels: Option<SegLabelMap>,
    /// Full (pre-occlusion) objects at their composite placement.
    pub x_c: Option<Image>,
    pub y_c: Option<Image>,
    pub paired: bool,
}

impl SceneExample {
    /// Checks the pairing and dimension invariants.
    pub fn validate(&self) -> Result<()> {
        let dims = self.x.dims();
        let mut all = vec![self.y.dims(), self.mask_x.dims(), self.mask_y.dims()];
        all.extend(self.c.iter().map(Image::dims));
        all.extend(self.c_labels.iter().map(SegLabelMap::dims));
        all.extend(self.x_c.iter().chain(&self.y_c).map(Image::dims));
        if all.iter().any(|d| *d != dims) {
            return Err(Error::Shape(format!(
                "scene components differ in size from {dims:?}"
            )));
        }
        if self.paired
            && (self.c.is_none()
                || self.c_labels.is_none()
                || self.x_c.is_none()
                || self.y_c.is_none())
        {
            return Err(Error::Invalid(
                "paired scene is missing its composite or targets".into(),
            ));
        }
        Ok(())
    }

    /// Visible masks of both objects in the composite.
    pub fn composite_masks(&self) -> Option<(BinaryMask, BinaryMask)> {
        self.c_labels.as_ref().map(labels_to_masks)
    }
}
