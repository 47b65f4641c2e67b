//! Binary masks, contour tracing and contour-shrinking augmentation.

mod augment;
mod contour;
mod family;
mod raster;

pub use augment::{augment_mask, default_zeta, AugmentParams, DEFAULT_ITERATIONS, DEFAULT_SMOOTHING};
pub use contour::{gaussian_smooth_circular, rasterize, rasterize_all, trace_contours, Contour};
pub use family::{
    bounding_circle, bounding_rect, brush_mask, dilate, distance_transform, mask_family,
    LabeledMask, Split, DILATION_RADIUS,
};
pub use raster::BinaryMask;
