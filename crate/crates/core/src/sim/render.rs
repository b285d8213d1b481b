//! Flat-shaded pinhole renderer for the bench scene: tissue sample on a
//! platform, fiducial markers, shaft and jaw of the tool, and a contact
//! dimple that darkens with indentation depth.

use super::contact::MaterialModel;
use super::kinematics::TipPose;
use super::state_synth::ToolModel;
use crate::imgproc::Image;
use nalgebra::Vector3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RenderSpec {
    pub width: usize,
    pub height: usize,
}

impl RenderSpec {
    pub fn paper() -> Self {
        RenderSpec {
            width: 960,
            height: 540,
        }
    }
    pub fn desk() -> Self {
        RenderSpec {
            width: 320,
            height: 180,
        }
    }
}

/// Tissue sample half extents (m).
const TISSUE_HX: f64 = 0.0625;
const TISSUE_HY: f64 = 0.036;
const MAX_DIMPLE_DEPTH: f64 = 0.008;

pub struct Camera {
    pos: Vector3<f64>,
    right: Vector3<f64>,
    up: Vector3<f64>,
    forward: Vector3<f64>,
    focal: f64,
    cx: f64,
    cy: f64,
}

impl Camera {
    /// The mount slides along x; its aim stays fixed at the centred
    /// pose, so lateral offsets produce genuine parallax.
    pub fn at_offset(offset_x: f64, spec: &RenderSpec) -> Self {
        let base = Vector3::new(0.0, -0.30, 0.22);
        let forward = (Vector3::zeros() - base).normalize();
        let right = forward.cross(&Vector3::z()).normalize();
        let up = right.cross(&forward);
        Camera {
            pos: base + Vector3::new(offset_x, 0.0, 0.0),
            right,
            up,
            forward,
            focal: 0.55 * spec.width as f64,
            cx: spec.width as f64 / 2.0,
            cy: spec.height as f64 / 2.0,
        }
    }

    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        let d = p - self.pos;
        let z = d.dot(&self.forward);
        if z < 1e-6 {
            return None;
        }
        Some((
            self.cx + self.focal * d.dot(&self.right) / z,
            self.cy - self.focal * d.dot(&self.up) / z,
        ))
    }
}

fn put(img: &mut Image, x: i64, y: i64, rgb: [u8; 3]) {
    if x < 0 || y < 0 || x >= img.w as i64 || y >= img.h as i64 {
        return;
    }
    let idx = 3 * (y as usize * img.w + x as usize);
    img.data[idx..idx + 3].copy_from_slice(&rgb);
}

/// Scanline fill of a convex polygon in pixel space.
fn fill_poly(img: &mut Image, pts: &[(f64, f64)], rgb: [u8; 3]) {
    if pts.len() < 3 {
        return;
    }
    let ymin = pts
        .iter()
        .map(|p| p.1)
        .fold(f64::INFINITY, f64::min)
        .floor()
        .max(0.0) as i64;
    let ymax = pts
        .iter()
        .map(|p| p.1)
        .fold(f64::NEG_INFINITY, f64::max)
        .ceil()
        .min(img.h as f64 - 1.0) as i64;
    for y in ymin..=ymax {
        let yc = y as f64 + 0.5;
        let mut xs: Vec<f64> = Vec::new();
        for i in 0..pts.len() {
            let (x0, y0) = pts[i];
            let (x1, y1) = pts[(i + 1) % pts.len()];
            if (y0 <= yc && yc < y1) || (y1 <= yc && yc < y0) {
                xs.push(x0 + (yc - y0) / (y1 - y0) * (x1 - x0));
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in xs.chunks(2) {
            if pair.len() < 2 {
                continue;
            }
            let x0 = pair[0].floor().max(0.0) as i64;
            let x1 = pair[1].ceil().min(img.w as f64 - 1.0) as i64;
            for x in x0..=x1 {
                put(img, x, y, rgb);
            }
        }
    }
}

fn shade(rgb: [u8; 3], k: f64) -> [u8; 3] {
    [
        (rgb[0] as f64 * k) as u8,
        (rgb[1] as f64 * k) as u8,
        (rgb[2] as f64 * k) as u8,
    ]
}

fn quad_on_plane(cam: &Camera, cx: f64, cy: f64, hx: f64, hy: f64, z: f64) -> Vec<(f64, f64)> {
    [
        (cx - hx, cy - hy),
        (cx + hx, cy - hy),
        (cx + hx, cy + hy),
        (cx - hx, cy + hy),
    ]
    .iter()
    .filter_map(|(x, y)| cam.project(&Vector3::new(*x, *y, z)))
    .collect()
}

pub struct RenderScene<'a> {
    pub camera_offset_x: f64,
    pub z_surface: f64,
    pub material: &'a MaterialModel,
    pub tool: &'a ToolModel,
    pub rcm: [f64; 3],
}

/// Draw one frame. `delta` is the current indentation (m), `jaw` the jaw
/// opening (rad); both only influence the picture, never the labels.
pub fn render_frame(
    scene: &RenderScene,
    spec: &RenderSpec,
    tip: &TipPose,
    delta: f64,
    jaw: f64,
) -> Image {
    let cam = Camera::at_offset(scene.camera_offset_x, spec);
    let mut img = Image::new(spec.width, spec.height);

    // background gradient
    for y in 0..spec.height {
        let g = 26 + (18 * y / spec.height.max(1)) as u8;
        for x in 0..spec.width {
            put(&mut img, x as i64, y as i64, [g, g, g + 6]);
        }
    }

    // platform rim, then the sample itself
    let rim = quad_on_plane(
        &cam,
        0.0,
        0.0,
        TISSUE_HX + 0.008,
        TISSUE_HY + 0.008,
        scene.z_surface - 0.002,
    );
    fill_poly(&mut img, &rim, [70, 72, 78]);
    let tissue = quad_on_plane(&cam, 0.0, 0.0, TISSUE_HX, TISSUE_HY, scene.z_surface);
    fill_poly(&mut img, &tissue, scene.material.color);

    // contact dimple: a darkened disc whose shade tracks indentation
    if delta > 0.0 {
        let depth = (delta / MAX_DIMPLE_DEPTH).min(1.0);
        let r_w = 0.008 + 0.010 * depth;
        let cxy = (tip.position.x, tip.position.y);
        let disc: Vec<(f64, f64)> = (0..16)
            .filter_map(|i| {
                let a = i as f64 / 16.0 * std::f64::consts::TAU;
                cam.project(&Vector3::new(
                    cxy.0 + r_w * a.cos(),
                    cxy.1 + r_w * a.sin(),
                    scene.z_surface,
                ))
            })
            .collect();
        fill_poly(
            &mut img,
            &disc,
            shade(scene.material.color, 1.0 - 0.65 * depth),
        );
    }

    // fiducials on the fixed frame around the platform
    for (fx, fy) in [
        (-0.085, -0.055),
        (0.085, -0.055),
        (0.085, 0.055),
        (-0.085, 0.055),
    ] {
        let sq = quad_on_plane(&cam, fx, fy, 0.004, 0.004, 0.0);
        fill_poly(&mut img, &sq, [235, 235, 235]);
    }

    // instrument shaft from the cannula down to the wrist
    let rcm = Vector3::new(scene.rcm[0], scene.rcm[1], scene.rcm[2]);
    if let (Some(a), Some(b)) = (cam.project(&rcm), cam.project(&tip.position)) {
        let dir = (b.0 - a.0, b.1 - a.1);
        let len = (dir.0 * dir.0 + dir.1 * dir.1).sqrt().max(1e-9);
        let n = (-dir.1 / len, dir.0 / len);
        let hw = 0.0045 * cam.focal / 0.37; // shaft half width in px at scene depth
        let quad = vec![
            (a.0 + n.0 * hw, a.1 + n.1 * hw),
            (b.0 + n.0 * hw, b.1 + n.1 * hw),
            (b.0 - n.0 * hw, b.1 - n.1 * hw),
            (a.0 - n.0 * hw, a.1 - n.1 * hw),
        ];
        fill_poly(&mut img, &quad, [148, 150, 158]);

        // jaw prongs splay around the shaft axis; footprint depends on
        // the mounted instrument
        let jl = scene.tool.jaw_length * cam.focal / 0.37;
        let jw = scene.tool.jaw_half_width * cam.focal / 0.37;
        let axis = (dir.0 / len, dir.1 / len);
        for side in [-1.0, 1.0] {
            let ang = side * (0.15 + 0.5 * jaw.max(0.0));
            let (c, s) = (ang.cos(), ang.sin());
            let d = (axis.0 * c - axis.1 * s, axis.0 * s + axis.1 * c);
            let e = (b.0 + d.0 * jl, b.1 + d.1 * jl);
            let pn = (-d.1, d.0);
            let quad = vec![
                (b.0 + pn.0 * jw, b.1 + pn.1 * jw),
                (e.0 + pn.0 * jw * 0.4, e.1 + pn.1 * jw * 0.4),
                (e.0 - pn.0 * jw * 0.4, e.1 - pn.1 * jw * 0.4),
                (b.0 - pn.0 * jw, b.1 - pn.1 * jw),
            ];
            fill_poly(&mut img, &quad, [200, 202, 210]);
        }
    }

    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::kinematics::ChainParams;
    use nalgebra::UnitQuaternion;

    fn tip_at(x: f64, y: f64, z: f64) -> TipPose {
        TipPose {
            position: Vector3::new(x, y, z),
            rotation: UnitQuaternion::identity(),
        }
    }

    fn scene<'a>(mat: &'a MaterialModel, tool: &'a ToolModel, off: f64) -> RenderScene<'a> {
        RenderScene {
            camera_offset_x: off,
            z_surface: 0.0,
            material: mat,
            tool,
            rcm: ChainParams::default().rcm,
        }
    }

    fn tissue_centroid_x(img: &Image, color: [u8; 3]) -> f64 {
        let (mut sx, mut n) = (0.0, 0.0);
        for y in 0..img.h {
            for x in 0..img.w {
                let i = 3 * (y * img.w + x);
                if img.data[i..i + 3] == color {
                    sx += x as f64;
                    n += 1.0;
                }
            }
        }
        assert!(n > 100.0, "tissue not visible");
        sx / n
    }

    #[test]
    fn deterministic_output() {
        let m = MaterialModel::seen();
        let t = ToolModel::cadiere();
        let s = scene(&m, &t, 0.0);
        let a = render_frame(&s, &RenderSpec::desk(), &tip_at(0.01, 0.0, 0.004), 0.0, 0.4);
        let b = render_frame(&s, &RenderSpec::desk(), &tip_at(0.01, 0.0, 0.004), 0.0, 0.4);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn camera_offset_produces_parallax_shift() {
        let m = MaterialModel::seen();
        let t = ToolModel::cadiere();
        let spec = RenderSpec::desk();
        let tip = tip_at(0.0, 0.0, 0.02);
        let a = render_frame(&scene(&m, &t, 0.0), &spec, &tip, 0.0, 0.4);
        let b = render_frame(&scene(&m, &t, 0.03), &spec, &tip, 0.0, 0.4);
        let shift = tissue_centroid_x(&b, m.color) - tissue_centroid_x(&a, m.color);
        // camera moves +x, fixed aim: scene content slides the other way
        let expected = -(0.55 * spec.width as f64) * 0.03 / 0.37;
        assert!(
            (shift - expected).abs() < expected.abs() * 0.35,
            "shift {shift:.1}px, expected ~{expected:.1}px"
        );
    }

    #[test]
    fn dimple_darkens_with_depth() {
        let m = MaterialModel::seen();
        let t = ToolModel::cadiere();
        let s = scene(&m, &t, 0.0);
        let spec = RenderSpec::desk();
        // tissue pixels are reddish; the instrument and frame are grey,
        // so restrict both counts to reddish pixels
        let reddish = |px: &[u8]| px[0] > px[2].saturating_add(10);
        let count_dark = |img: &Image| {
            img.data
                .chunks(3)
                .filter(|px| reddish(px) && px[0] < m.color[0])
                .count()
        };
        let darkest = |img: &Image| {
            img.data
                .chunks(3)
                .filter(|px| reddish(px))
                .map(|px| px[0] as i32)
                .min()
                .unwrap()
        };
        let shallow = render_frame(&s, &spec, &tip_at(0.0, 0.0, -0.002), 0.002, 0.1);
        let deep = render_frame(&s, &spec, &tip_at(0.0, 0.0, -0.007), 0.007, 0.1);
        assert!(count_dark(&shallow) > 0);
        assert!(count_dark(&deep) > count_dark(&shallow));
        assert!(darkest(&deep) < darkest(&shallow) - 30);
    }

    #[test]
    fn tools_render_differently() {
        let m = MaterialModel::seen();
        let ca = ToolModel::cadiere();
        let ma = ToolModel::maryland();
        let spec = RenderSpec::desk();
        let tip = tip_at(0.005, -0.004, 0.01);
        let a = render_frame(&scene(&m, &ca, 0.0), &spec, &tip, 0.0, 0.4);
        let b = render_frame(&scene(&m, &ma, 0.0), &spec, &tip, 0.0, 0.4);
        let diff = a.data.iter().zip(&b.data).filter(|(x, y)| x != y).count();
        assert!(
            diff > 50,
            "jaw geometry change is invisible: {diff} px differ"
        );
    }

    #[test]
    fn platform_offset_moves_tissue_but_not_fiducials() {
        let m = MaterialModel::seen();
        let t = ToolModel::cadiere();
        let spec = RenderSpec::desk();
        let tip = tip_at(0.0, 0.0, 0.02);
        let mut s1 = scene(&m, &t, 0.0);
        let mut s2 = scene(&m, &t, 0.0);
        s1.z_surface = 0.0;
        s2.z_surface = -0.019;
        let a = render_frame(&s1, &spec, &tip, 0.0, 0.4);
        let b = render_frame(&s2, &spec, &tip, 0.0, 0.4);
        let white = |img: &Image| {
            img.data
                .chunks(3)
                .enumerate()
                .filter(|(_, px)| px[0] == 235 && px[1] == 235)
                .map(|(i, _)| i)
                .collect::<Vec<_>>()
        };
        assert_eq!(white(&a), white(&b), "fiducials must stay put");
        assert_ne!(a.data, b.data, "platform shift must be visible");
    }
}
