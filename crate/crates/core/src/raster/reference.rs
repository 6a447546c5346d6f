use nalgebra::Vector2;

use super::{project_gaussian, Channels, FeatureImage, RenderOptions};
use crate::error::Result;
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::scene::Scene;

/// Brute-force renderer: every pixel sorts every projected splat by depth
/// and evaluates the compositing sum directly, without tiles. The
/// thresholds in `opts` are honored so results line up with [`super::render`].
pub fn render_reference(
    scene: &Scene,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    channels: Channels<'_>,
    opts: &RenderOptions,
) -> Result<FeatureImage> {
    intr.validate()?;
    let (payload, ch) = channels.payload(scene)?;
    let (w, h) = (intr.width as usize, intr.height as usize);
    let projected: Vec<_> = scene
        .splats()
        .iter()
        .map(|g| project_gaussian(g, pose, intr, opts))
        .collect();
    let mut img = FeatureImage::zeros(h, w, ch);
    let cut2 = opts.cutoff_sigma * opts.cutoff_sigma;

    for y in 0..h {
        for x in 0..w {
            let p = Vector2::new(x as f64, y as f64);
            let mut order: Vec<(f64, usize)> = projected
                .iter()
                .enumerate()
                .filter(|(_, s)| !s.culled)
                .map(|(i, s)| (s.depth, i))
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

            let mut value = vec![0.0; ch];
            let mut transmittance = 1.0;
            for &(_, i) in &order {
                let s = &projected[i];
                let Some(inv) = s.cov2d.try_inverse() else {
                    continue;
                };
                let d = p - s.mean2d;
                let q = (d.transpose() * inv * d)[(0, 0)];
                if q > cut2 {
                    continue;
                }
                let g = (-0.5 * q).exp().min(1.0);
                let a = scene.splats()[i].opacity * g;
                if a < opts.min_contribution {
                    continue;
                }
                for (c, v) in value.iter_mut().enumerate() {
                    *v += payload[i * ch + c] * a * transmittance;
                }
                transmittance *= 1.0 - a;
                if transmittance < opts.transmittance_floor {
                    break;
                }
            }
            for (c, v) in value.iter().enumerate() {
                img.data[(c * h + y) * w + x] = *v;
            }
            img.alpha[y * w + x] = 1.0 - transmittance;
        }
    }
    Ok(img)
}
