//! Seeded random inputs.

use pictor::imaging::ImageBuffer;
use rand::Rng;

/// RGB image with integer-valued samples drawn from `0..levels`, scaled to span `[0, 255]`.
///
/// Few levels produce many exact ties between neighbors, which is where comparison-based
/// descriptors are most fragile.
pub fn random_image(width: usize, height: usize, levels: u32, rng: &mut impl Rng) -> ImageBuffer {
    let levels = levels.clamp(2, 256);
    let step = 255 / (levels - 1);
    let data = (0..width * height * 3).map(|_| (rng.random_range(0..levels) * step) as f32).collect();
    ImageBuffer::new(width, height, 3, data).expect("valid dimensions")
}

/// A mix of image sizes (5..=16 per side) and quantization levels.
pub fn random_small_image(rng: &mut impl Rng) -> ImageBuffer {
    let w = rng.random_range(5..=16);
    let h = rng.random_range(5..=16);
    let levels = *[2u32, 4, 16, 256].get(rng.random_range(0..4)).expect("in range");
    random_image(w, h, levels, rng)
}

/// `n` unit-norm vectors of dimension `dim`.
pub fn random_unit_vectors(n: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| loop {
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            if norm > 1e-3 {
                break v.iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}
