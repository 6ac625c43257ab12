//! Rasterizes simulator states into RGB frames and writes binary PPM files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::analysis::ContributionReport;
use crate::error::{Error, Result};
use crate::geometry::{Box2, SceneBounds};
use crate::observation::EntityId;
use crate::sim::EnvState;

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
pub const GREEN: Rgb = [0, 160, 0];
pub const RED: Rgb = [220, 0, 0];
pub const CYAN: Rgb = [0, 200, 200];
pub const BLUE: Rgb = [0, 0, 220];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl FrameImage {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Usage(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        let pixels = fill
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Ok(FrameImage {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major RGB bytes, top row first.
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    fn blend(&mut self, x: usize, y: usize, c: Rgb, alpha: f64) {
        let old = self.get(x, y);
        let mix = |o: u8, n: u8| ((1.0 - alpha) * o as f64 + alpha * n as f64).round() as u8;
        self.set(
            x,
            y,
            [mix(old[0], c[0]), mix(old[1], c[1]), mix(old[2], c[2])],
        );
    }

    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, c: Rgb) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                self.set(x, y, c);
            }
        }
    }

    pub fn outline_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, c: Rgb) {
        let (x1, y1) = (x1.min(self.width), y1.min(self.height));
        if x0 >= x1 || y0 >= y1 {
            return;
        }
        for x in x0..x1 {
            self.set(x, y0, c);
            self.set(x, y1 - 1, c);
        }
        for y in y0..y1 {
            self.set(x0, y, c);
            self.set(x1 - 1, y, c);
        }
    }

    /// Bresenham line blended over the existing pixels.
    pub fn line(&mut self, from: (i64, i64), to: (i64, i64), c: Rgb, alpha: f64) {
        let (mut x, mut y) = from;
        let (dx, dy) = ((to.0 - x).abs(), -(to.1 - y).abs());
        let (sx, sy) = (if x < to.0 { 1 } else { -1 }, if y < to.1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            if (0..self.width as i64).contains(&x) && (0..self.height as i64).contains(&y) {
                self.blend(x as usize, y as usize, c, alpha);
            }
            if (x, y) == to {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
}

struct Raster {
    scene: SceneBounds,
    scale: f64,
}

impl Raster {
    /// Pixel span `[x0, x1) x [y0, y1)` of a world box, at least one pixel
    /// wide. World +y points up.
    fn rect(&self, b: &Box2) -> (usize, usize, usize, usize) {
        let px = |v: f64| (v * self.scale).round().max(0.0) as usize;
        let x0 = px(b.left());
        let y0 = px(self.scene.height - b.top());
        (
            x0,
            y0,
            px(b.right()).max(x0 + 1),
            px(self.scene.height - b.bottom()).max(y0 + 1),
        )
    }

    fn point(&self, x: f64, y: f64) -> (i64, i64) {
        (
            (x * self.scale).floor() as i64,
            ((self.scene.height - y) * self.scale).floor() as i64,
        )
    }
}

/// Draws `state` as seen by sensor `controlled`. With contributions, a line
/// joins the controlled sensor to every entity appearing in a relation with
/// it, green for a positive summed contribution and red for a negative one,
/// with opacity relative to the frame's largest magnitude.
pub fn render_frame(
    state: &EnvState,
    controlled: u32,
    contributions: Option<&ContributionReport>,
    scale: f64,
) -> Result<FrameImage> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Usage(format!(
            "render scale must be positive, got {scale}"
        )));
    }
    let scene = *state.scene();
    let r = Raster { scene, scale };
    let mut img = FrameImage::new(
        ((scene.width * scale).round() as usize).max(1),
        ((scene.height * scale).round() as usize).max(1),
        WHITE,
    )?;
    for o in &state.objects {
        let (x0, y0, x1, y1) = r.rect(&o.bbox);
        img.fill_rect(x0, y0, x1, y1, if o.captured { GREEN } else { BLACK });
    }
    for s in &state.sensors {
        let (x0, y0, x1, y1) = r.rect(&s.view);
        img.outline_rect(x0, y0, x1, y1, if s.id == controlled { CYAN } else { BLUE });
    }
    let Some(report) = contributions else {
        return Ok(img);
    };
    let Some(me) = state.sensors.iter().find(|s| s.id == controlled) else {
        return Ok(img);
    };
    let me_id = EntityId::Sensor(controlled);
    let mut per_entity: BTreeMap<EntityId, f64> = BTreeMap::new();
    for (&(a, b), &c) in report.pairs.iter().zip(&report.contributions) {
        let other = if a == me_id { b } else { a };
        if other != me_id {
            *per_entity.entry(other).or_default() += c;
        }
    }
    let max = per_entity.values().fold(0.0f64, |m, c| m.max(c.abs()));
    if max == 0.0 {
        return Ok(img);
    }
    let from = r.point(me.view.cx, me.view.cy);
    for (id, c) in per_entity {
        let center = match id {
            EntityId::Sensor(k) => state.sensors.iter().find(|s| s.id == k).map(|s| s.view),
            EntityId::Object(k) => state.objects.iter().find(|o| o.id == k).map(|o| o.bbox),
        };
        if let Some(b) = center {
            let color = if c >= 0.0 { GREEN } else { RED };
            img.line(from, r.point(b.cx, b.cy), color, c.abs() / max);
        }
    }
    Ok(img)
}

pub fn encode_ppm(img: &FrameImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_ppm(img: &FrameImage, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_ppm(img))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Dynamics, EpisodeParams, Sensor, SimObject};

    /// Minimal P6 reader written against the format description only.
    fn read_p6(bytes: &[u8]) -> (usize, usize, Vec<Rgb>) {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap().to_string());
        }
        pos += 1;
        assert_eq!(fields[0], "P6");
        assert_eq!(fields[3], "255");
        let (w, h): (usize, usize) = (fields[1].parse().unwrap(), fields[2].parse().unwrap());
        let body = &bytes[pos..];
        assert_eq!(body.len(), w * h * 3);
        (w, h, body.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    fn scene_with(objects: Vec<SimObject>, sensors: Vec<Sensor>) -> EnvState {
        EnvState::from_parts(
            EpisodeParams {
                scene: SceneBounds::default(),
                n_sensors: sensors.len() as u32,
                n_objects: objects.len() as u32,
                time_scale: 1.0,
                horizon: 10,
                spawn_rate: 0.0,
            },
            Dynamics {
                p_toggle: 0.0,
                sigma_turn: 0.0,
                p_reverse: 0.0,
            },
            sensors,
            objects,
            0,
        )
        .unwrap()
    }

    fn object(id: u64, cx: f64, cy: f64, captured: bool) -> SimObject {
        SimObject {
            id,
            bbox: Box2::new(cx, cy, 0.1, 0.1).unwrap(),
            heading: 0.0,
            speed: 0.0,
            moving: false,
            captured,
        }
    }

    #[test]
    fn ppm_examples() {
        let img = FrameImage::new(1, 1, WHITE).unwrap();
        assert_eq!(encode_ppm(&img), b"P6\n1 1\n255\n\xff\xff\xff".to_vec());
        let mut img = FrameImage::new(2, 1, WHITE).unwrap();
        img.set(0, 0, BLACK);
        assert_eq!(&encode_ppm(&img)[11..], &[0, 0, 0, 255, 255, 255]);
        assert!(FrameImage::new(0, 3, WHITE).is_err());
    }

    #[test]
    fn ppm_round_trip_through_reference_reader() {
        let mut img = FrameImage::new(7, 5, WHITE).unwrap();
        for y in 0..5 {
            for x in 0..7 {
                img.set(x, y, [(x * 30) as u8, (y * 50) as u8, ((x + y) * 7) as u8]);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ppm");
        write_ppm(&img, &path).unwrap();
        let (w, h, px) = read_p6(&std::fs::read(&path).unwrap());
        assert_eq!((w, h), (7, 5));
        for y in 0..5 {
            for x in 0..7 {
                assert_eq!(px[y * 7 + x], img.get(x, y));
            }
        }
        let missing = dir.path().join("no/such/dir/f.ppm");
        let err = write_ppm(&img, &missing).unwrap_err().to_string();
        assert!(err.contains("no/such/dir"), "{err}");
    }

    #[test]
    fn empty_scene_is_white() {
        let img = render_frame(&scene_with(vec![], vec![]), 0, None, 20.0).unwrap();
        assert_eq!((img.width(), img.height()), (20, 20));
        assert!(img.pixels().iter().all(|&b| b == 255));
    }

    #[test]
    fn captured_and_uncaptured_rectangles() {
        let state = scene_with(
            vec![object(0, 0.25, 0.75, true), object(1, 0.75, 0.25, false)],
            vec![],
        );
        let img = render_frame(&state, 0, None, 20.0).unwrap();
        let count = |c: Rgb| {
            (0..20)
                .flat_map(|y| (0..20).map(move |x| (x, y)))
                .filter(|&(x, y)| img.get(x, y) == c)
                .count()
        };
        assert_eq!(count(GREEN), 4);
        assert_eq!(count(BLACK), 4);
        // Upper-left object in world space lands in the top-left quadrant.
        assert_eq!(img.get(4, 4), GREEN);
        assert_eq!(img.get(15, 15), BLACK);
        assert!(render_frame(&state, 0, None, 0.0).is_err());
    }

    #[test]
    fn rendering_is_deterministic_with_lines() {
        let sensors = vec![
            Sensor {
                id: 0,
                view: Box2::new(0.5, 0.5, 0.2, 0.2).unwrap(),
                speed: 0.02,
            },
            Sensor {
                id: 1,
                view: Box2::new(0.2, 0.2, 0.2, 0.2).unwrap(),
                speed: 0.02,
            },
        ];
        let state = scene_with(
            vec![object(0, 0.9, 0.5, false), object(1, 0.5, 0.9, false)],
            sensors,
        );
        let report = ContributionReport {
            pairs: vec![
                (EntityId::Sensor(0), EntityId::Object(0)),
                (EntityId::Object(1), EntityId::Sensor(0)),
                (EntityId::Sensor(1), EntityId::Object(0)),
            ],
            contributions: vec![0.5, -1.0, 0.25],
            action: crate::sim::Action::Up,
            probs: [0.2; 5],
            divergence: 0.1,
        };
        let a = render_frame(&state, 0, Some(&report), 50.0).unwrap();
        let b = render_frame(&state, 0, Some(&report), 50.0).unwrap();
        assert_eq!(encode_ppm(&a), encode_ppm(&b));
        // Strongest (negative) link points straight up to object 1.
        assert_eq!(a.get(25, 15), RED);
        assert_eq!(a.get(20, 25), CYAN);
        let plain = render_frame(&state, 0, None, 50.0).unwrap();
        assert_ne!(a, plain);
    }
}
