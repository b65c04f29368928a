use super::track::Track;
use super::CarState;
use crate::error::{Error, Result};

/// Row-major 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Frame {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * Self::CHANNELS {
            return Err(Error::shape("frame", &[height, width, Self::CHANNELS], &[data.len()]));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn byte_len(width: usize, height: usize) -> usize {
        width * height * Self::CHANNELS
    }
}

pub const SKY: [u8; 3] = [135, 190, 235];
pub const ROAD: [u8; 3] = [96, 96, 96];
pub const LANE_EDGE: [u8; 3] = [240, 240, 240];
pub const GRASS: [u8; 3] = [48, 136, 48];

pub const MIN_RESOLUTION: usize = 8;
pub const CAMERA_HEIGHT: f64 = 1.5;
/// Horizon row as a fraction of image height.
pub const HORIZON: f64 = 0.4;
/// Width of the painted band inside each road edge.
pub const EDGE_BAND: f64 = 0.15;

/// Pinhole camera looking along the heading, level with the ground plane,
/// 90° horizontal field of view.
#[derive(Clone, Copy, Debug)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    focal: f64,
    horizon: f64,
}

impl Camera {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width < MIN_RESOLUTION || height < MIN_RESOLUTION {
            return Err(Error::Config(format!(
                "camera resolution {width}x{height} below minimum {MIN_RESOLUTION}x{MIN_RESOLUTION}"
            )));
        }
        Ok(Self {
            width,
            height,
            focal: width as f64 / 2.0,
            horizon: HORIZON * height as f64,
        })
    }

    /// Forward ground distance seen by pixel row `y`, or `None` above the horizon.
    pub fn row_distance(&self, y: usize) -> Option<f64> {
        self.distance_at(y as f64 + 0.5)
    }

    /// Forward ground distance at continuous image row `fy`.
    pub fn distance_at(&self, fy: f64) -> Option<f64> {
        let below = fy - self.horizon;
        (below > 0.0).then(|| self.focal * CAMERA_HEIGHT / below)
    }

    /// Ground point (world meters) under the centre of pixel `(x, y)`.
    pub fn ground_point(&self, state: &CarState, x: usize, y: usize) -> Option<[f64; 2]> {
        self.ground_point_at(state, x as f64 + 0.5, y as f64 + 0.5)
    }

    /// Ground point under continuous image coordinates `(fx, fy)`.
    pub fn ground_point_at(&self, state: &CarState, fx: f64, fy: f64) -> Option<[f64; 2]> {
        let d = self.distance_at(fy)?;
        let lateral = (fx - self.width as f64 / 2.0) * d / self.focal;
        let (s, c) = state.heading.sin_cos();
        // right of travel is (sin θ, −cos θ)
        Some([
            state.position[0] + d * c + lateral * s,
            state.position[1] + d * s - lateral * c,
        ])
    }
}

pub fn ground_color(distance: f64, half_width: f64) -> [u8; 3] {
    if distance <= half_width - EDGE_BAND {
        ROAD
    } else if distance <= half_width {
        LANE_EDGE
    } else {
        GRASS
    }
}

/// Subsamples per pixel side; the pixel colour is their mean.
pub const SUPERSAMPLE: usize = 2;

/// Render the forward camera: sky above the horizon, and below it the
/// colour of the ground point each subsample sees, box-filtered per pixel.
pub fn render_camera(state: &CarState, track: &Track, width: usize, height: usize) -> Result<Frame> {
    let cam = Camera::new(width, height)?;
    let n = SUPERSAMPLE;
    let offsets: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    let hw = track.half_width();
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        // rows entirely above the horizon
        if cam.distance_at(y as f64 + offsets[n - 1]).is_none() {
            for _ in 0..width {
                data.extend_from_slice(&SKY);
            }
            continue;
        }
        for x in 0..width {
            let mut acc = [0u32; 3];
            for &oy in &offsets {
                for &ox in &offsets {
                    let rgb = match cam.ground_point_at(state, x as f64 + ox, y as f64 + oy) {
                        Some(p) => ground_color(track.distance(p), hw),
                        None => SKY,
                    };
                    for c in 0..3 {
                        acc[c] += rgb[c] as u32;
                    }
                }
            }
            let k = (n * n) as u32;
            data.extend(acc.iter().map(|&v| ((v + k / 2) / k) as u8));
        }
    }
    Frame::new(width, height, data)
}
