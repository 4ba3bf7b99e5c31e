//! Procedural portrait-like images used when no photo corpus is at hand.

use rand::Rng;

use crate::tensor::{Real, Tensor};

fn smoothstep(edge: f64, x: f64) -> f64 {
    // Soft 0..1 transition over roughly one and a half pixels.
    let t = ((x - edge) / 1.5 + 0.5).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Coverage of pixel `(y, x)` by an axis-aligned ellipse, antialiased.
fn ellipse(y: f64, x: f64, cy: f64, cx: f64, ry: f64, rx: f64) -> f64 {
    let d = (((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2)).sqrt();
    // Distance to the boundary in pixels along the smaller radius.
    1.0 - smoothstep(0.0, (d - 1.0) * ry.min(rx))
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, base: f64, spread: f64) -> f64 {
    base + rng.random_range(-spread..=spread)
}

fn color<R: Rng + ?Sized>(rng: &mut R, base: [f64; 3], spread: f64) -> [f64; 3] {
    base.map(|c| jitter(rng, c, spread).clamp(0.0, 1.0))
}

fn blend(dst: &mut [f64; 3], src: [f64; 3], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d * (1.0 - alpha) + s * alpha;
    }
}

/// A centred head-and-shoulders composition over a smooth background:
/// gradients, a few ellipses with soft edges and mild shading.
/// Returns `[height, width, 3]` values in `[0, 1]`.
pub fn face_like_scene<T: Real, R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Tensor<T> {
    let (h, w) = (height as f64, width as f64);
    let bg_top = color(rng, [0.55, 0.6, 0.7], 0.35);
    let bg_bottom = color(rng, [0.4, 0.4, 0.45], 0.35);
    let hair = color(rng, [0.25, 0.18, 0.12], 0.2);
    let skin = color(rng, [0.78, 0.6, 0.5], 0.12);
    let shirt = color(rng, [0.3, 0.35, 0.5], 0.3);
    let lips = color(rng, [0.7, 0.35, 0.35], 0.1);
    let eye = color(rng, [0.15, 0.12, 0.1], 0.08);

    let cx = w * jitter(rng, 0.5, 0.05);
    let cy = h * jitter(rng, 0.48, 0.04);
    let face_ry = h * jitter(rng, 0.3, 0.03);
    let face_rx = w * jitter(rng, 0.22, 0.03);
    let hair_scale = jitter(rng, 1.2, 0.08);
    let light = rng.random_range(-1.0..1.0f64);
    let wave = (rng.random_range(1.0..3.0f64), rng.random_range(0.0..std::f64::consts::TAU));

    let eye_dy = -0.2 * face_ry;
    let eye_dx = 0.42 * face_rx;
    let eye_r = (0.1 * face_ry, 0.16 * face_rx);
    let mouth = (cy + 0.5 * face_ry, 0.07 * face_ry, 0.38 * face_rx);

    let mut out = Tensor::zeros(&[height, width, 3]);
    for yi in 0..height {
        for xi in 0..width {
            let (y, x) = (yi as f64 + 0.5, xi as f64 + 0.5);
            let t = y / h;
            let ripple = 0.04 * (wave.0 * std::f64::consts::PI * x / w + wave.1).sin();
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = bg_top[c] * (1.0 - t) + bg_bottom[c] * t + ripple;
            }
            blend(&mut px, shirt, ellipse(y, x, h * 1.12, cx, h * 0.32, w * 0.48));
            blend(&mut px, hair, ellipse(y, x, cy - 0.1 * face_ry, cx, face_ry * hair_scale, face_rx * hair_scale));
            // Neck then face, shaded left to right by the light direction.
            let shade = 1.0 + 0.15 * light * (x - cx) / face_rx;
            let skin_lit = skin.map(|v| (v * shade).clamp(0.0, 1.0));
            blend(&mut px, skin_lit, ellipse(y, x, cy + face_ry, cx, face_ry * 0.5, face_rx * 0.45));
            blend(&mut px, skin_lit, ellipse(y, x, cy, cx, face_ry, face_rx));
            for side in [-1.0, 1.0] {
                blend(&mut px, eye, ellipse(y, x, cy + eye_dy, cx + side * eye_dx, eye_r.0, eye_r.1));
            }
            blend(&mut px, lips, ellipse(y, x, mouth.0, cx, mouth.1, mouth.2));
            for (c, v) in px.into_iter().enumerate() {
                out.set(&[yi, xi, c], T::from_f64(v.clamp(0.0, 1.0)));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scenes_are_in_range_and_vary() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Tensor<f64> = face_like_scene(40, 32, &mut rng);
        let b: Tensor<f64> = face_like_scene(40, 32, &mut rng);
        assert_eq!(a.shape(), &[40, 32, 3]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.max_abs_diff(&b) > 0.05);
        // Not flat: there is structure for the metrics to see.
        let mean = a.sum() / a.len() as f64;
        let var = a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a.len() as f64;
        assert!(var > 1e-3);
    }
}
