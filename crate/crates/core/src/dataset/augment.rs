use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{BinaryImage, GeometryError};

/// Per-transform probability.
pub const AUGMENT_PROB: f64 = 0.05;

/// Applies horizontal flip, vertical flip and 90/180/270 degree rotations in
/// that order, each drawn independently with probability [`AUGMENT_PROB`].
/// The label passes through unchanged.
pub fn augment(
    image: &BinaryImage,
    label: f64,
    seed: u64,
) -> Result<(BinaryImage, f64), GeometryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((augment_with(image, AUGMENT_PROB, &mut rng)?, label))
}

/// Same transforms with probability `prob`, drawing from `rng`. Exactly five
/// uniforms are consumed per call.
pub fn augment_with<R: Rng + ?Sized>(
    image: &BinaryImage,
    prob: f64,
    rng: &mut R,
) -> Result<BinaryImage, GeometryError> {
    let draws: [bool; 5] = std::array::from_fn(|_| rng.gen::<f64>() < prob);
    let mut img = image.clone();
    if draws[0] {
        img = img.flip_horizontal();
    }
    if draws[1] {
        img = img.flip_vertical();
    }
    for (k, &on) in draws[2..].iter().enumerate() {
        if on {
            img = img.rotate_quarter(k as u8 + 1)?;
        }
    }
    Ok(img)
}
