//! Synthetic boresight image sequences with injected laser-power faults.
//!
//! The thermal model is phenomenological: the camera is centred on the laser
//! spot, every scanned position leaves a Gaussian heat deposit scaled by the
//! laser power at that time, and deposits cool geometrically per elapsed
//! frame. Only the rightward (powered) pass of each scan line is emitted; the
//! unpowered return pass still takes time, so the previous line has cooled by
//! `2 · frames_per_line` frames when the next one starts.

mod dataset;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use dataset::{
    decode_layer_bytes, encode_layer_bytes, generate_dataset, layer_file_name, load_layer, load_manifest, DatasetManifest,
    DatasetRequest, LayerEntry, LayerRole, FORMAT_VERSION,
};

/// Rectangle in (line, frame-in-line) coordinates whose frames are uniformly
/// warmer, producing slow "bump" trends in anomaly scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HotRegion {
    pub lines: std::ops::Range<usize>,
    pub frames: std::ops::Range<usize>,
    pub bias_c: f32,
}

impl HotRegion {
    pub fn contains(&self, line: usize, frame: usize) -> bool {
        self.lines.contains(&line) && self.frames.contains(&frame)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessParams {
    pub lines_per_layer: usize,
    pub frames_per_line: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub ambient_temp: f32,
    /// Fraction of maximum laser power.
    pub nominal_power: f32,
    /// Deposit peak temperature rise (°C) per unit of power.
    pub spot_peak_gain: f32,
    /// Gaussian deposit width in pixels.
    pub spot_sigma: f32,
    /// Per-frame cooling factor of past deposits, in (0, 1).
    pub trail_decay: f32,
    /// Pixels the spot advances per frame along a scan line.
    pub scan_step_px: f32,
    /// Pixels between neighbouring scan lines.
    pub line_pitch_px: f32,
    pub hot_region: Option<HotRegion>,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for ProcessParams {
    fn default() -> Self {
        ProcessParams {
            lines_per_layer: 215,
            frames_per_line: 40,
            frame_height: 64,
            frame_width: 64,
            ambient_temp: 170.0,
            nominal_power: 0.61,
            spot_peak_gain: 160.0,
            spot_sigma: 3.0,
            trail_decay: 0.85,
            scan_step_px: 1.5,
            line_pitch_px: 4.0,
            hot_region: None,
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl ProcessParams {
    /// `min_lines` is the snippet length the data must support (p + q).
    pub fn validate(&self, min_lines: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.lines_per_layer < min_lines.max(1) {
            return bad(format!(
                "lines_per_layer {} is below the required {min_lines}",
                self.lines_per_layer
            ));
        }
        if self.frames_per_line == 0 || self.frame_height == 0 || self.frame_width == 0 {
            return bad("frame counts and sizes must be positive".into());
        }
        if !(self.trail_decay > 0.0 && self.trail_decay < 1.0) {
            return bad(format!("trail_decay must be in (0, 1), got {}", self.trail_decay));
        }
        if !(self.nominal_power > 0.0 && self.nominal_power <= 1.0) {
            return bad(format!("nominal_power must be in (0, 1], got {}", self.nominal_power));
        }
        if !(self.spot_sigma > 0.0) || self.noise_sigma < 0.0 || self.spot_peak_gain < 0.0 {
            return bad("spot_sigma must be positive; noise_sigma and spot_peak_gain non-negative".into());
        }
        if !(self.scan_step_px >= 0.0 && self.line_pitch_px >= 0.0) {
            return bad("scan geometry must be non-negative".into());
        }
        let finite = [
            self.ambient_temp,
            self.spot_peak_gain,
            self.spot_sigma,
            self.scan_step_px,
            self.line_pitch_px,
            self.noise_sigma,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("process parameters must be finite".into());
        }
        if let Some(h) = &self.hot_region {
            if !h.bias_c.is_finite() {
                return bad("hot region bias must be finite".into());
            }
        }
        Ok(())
    }

    pub fn frame_len(&self) -> usize {
        self.frame_height * self.frame_width
    }
}

/// One injected fault: `duration_lines` consecutive lines scanned at
/// `off_nominal_power`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultEntry {
    pub layer_id: u32,
    pub start_line: usize,
    pub duration_lines: usize,
    pub off_nominal_power: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultSchedule {
    pub entries: Vec<FaultEntry>,
}

impl FaultSchedule {
    pub fn for_layer(&self, layer_id: u32) -> impl Iterator<Item = &FaultEntry> {
        self.entries.iter().filter(move |e| e.layer_id == layer_id)
    }
}

/// Where faults go inside an off-nominal layer: evenly spaced events whose
/// durations cycle through 1..=4 lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultPattern {
    pub events: Vec<(usize, usize)>,
}

impl FaultPattern {
    pub fn evenly_spaced(lines_per_layer: usize, count: usize) -> Self {
        let spacing = lines_per_layer / (count + 1);
        let events = (0..count)
            .map(|k| (spacing * (k + 1), k % 4 + 1))
            .filter(|&(start, dur)| dur <= 4 && start + dur <= lines_per_layer)
            .collect();
        FaultPattern { events }
    }

    pub fn schedule(&self, layer_id: u32, off_nominal_power: f32) -> Vec<FaultEntry> {
        self.events
            .iter()
            .map(|&(start_line, duration_lines)| FaultEntry {
                layer_id,
                start_line,
                duration_lines,
                off_nominal_power,
            })
            .collect()
    }
}

/// Frames of one build layer, `frames[((line * frames_per_line) + j) * h * w ..]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSequence {
    pub layer_id: u32,
    pub column_id: u32,
    pub lines: usize,
    pub frames_per_line: usize,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<f32>,
    pub labels: BTreeSet<usize>,
}

impl LayerSequence {
    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    pub fn frame_count(&self) -> usize {
        self.lines * self.frames_per_line
    }

    pub fn frame(&self, line: usize, j: usize) -> &[f32] {
        let len = self.frame_len();
        &self.frames[(line * self.frames_per_line + j) * len..][..len]
    }

    pub fn frame_mut(&mut self, line: usize, j: usize) -> &mut [f32] {
        let len = self.frame_len();
        let fpl = self.frames_per_line;
        &mut self.frames[(line * fpl + j) * len..][..len]
    }
}

fn line_powers(params: &ProcessParams, faults: &[&FaultEntry]) -> Result<(Vec<f32>, BTreeSet<usize>)> {
    let mut power = vec![params.nominal_power; params.lines_per_layer];
    let mut labels = BTreeSet::new();
    for f in faults {
        if !(1..=4).contains(&f.duration_lines) {
            return Err(Error::InvalidArgument(format!(
                "fault duration must be 1..=4 lines, got {}",
                f.duration_lines
            )));
        }
        if f.start_line + f.duration_lines > params.lines_per_layer {
            return Err(Error::InvalidArgument(format!(
                "fault at lines {}..{} exceeds the {} lines of layer {}",
                f.start_line,
                f.start_line + f.duration_lines,
                params.lines_per_layer,
                f.layer_id
            )));
        }
        if !(f.off_nominal_power >= 0.0 && f.off_nominal_power <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "off-nominal power must be in [0, 1], got {}",
                f.off_nominal_power
            )));
        }
        for line in f.start_line..f.start_line + f.duration_lines {
            power[line] = f.off_nominal_power;
            if f.off_nominal_power != params.nominal_power {
                labels.insert(line);
            }
        }
    }
    Ok((power, labels))
}

fn gaussian_profile(len: usize, centre: f32, sigma: f32, out: &mut [f32]) {
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (i, v) in out.iter_mut().enumerate().take(len) {
        let d = i as f32 - centre;
        *v = (-d * d * inv).exp();
    }
}

/// Generates one layer. Faults listed for other layers are ignored.
pub fn generate_layer(params: &ProcessParams, faults: &FaultSchedule, layer_id: u32) -> Result<LayerSequence> {
    params.validate(1)?;
    let mine: Vec<&FaultEntry> = faults.for_layer(layer_id).collect();
    let (power, labels) = line_powers(params, &mine)?;

    let (h, w) = (params.frame_height, params.frame_width);
    let fpl = params.frames_per_line;
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let sigma = params.spot_sigma;
    let reach = 3.0 * sigma;
    let decay = params.trail_decay;
    // Deposits older than this contribute less than 1e-4 of a fresh one.
    let max_age = ((1e-4f32).ln() / decay.ln()).ceil() as usize;
    let period = 2 * fpl;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(layer_id as u64);
    let noise = Normal::new(0.0f32, params.noise_sigma.max(f32::MIN_POSITIVE))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut frames = vec![0.0f32; params.lines_per_layer * fpl * h * w];
    let mut col_profile = vec![0.0f32; w];
    let mut row_profile = vec![0.0f32; h];
    let mut deposit = vec![0.0f32; w];

    for line in 0..params.lines_per_layer {
        for j in 0..fpl {
            let frame = &mut frames[(line * fpl + j) * h * w..][..h * w];
            frame.fill(params.ambient_temp);
            let age_cap = (line * period + j).min(max_age);
            // Walk back over past scan lines that are still warm.
            for back in 0..=age_cap / period + 1 {
                if back > line {
                    break;
                }
                let past_line = line - back;
                let dy = -(back as f32) * params.line_pitch_px;
                if dy.abs() > cy + reach {
                    break;
                }
                deposit.fill(0.0);
                let mut any = false;
                for jp in 0..fpl {
                    let Some(age) = (back * period + j).checked_sub(jp) else { continue };
                    if age > max_age {
                        continue;
                    }
                    let dx = (jp as f32 - j as f32) * params.scan_step_px;
                    if dx.abs() > cx + reach {
                        continue;
                    }
                    let amp = params.spot_peak_gain * power[past_line] * decay.powi(age as i32);
                    gaussian_profile(w, cx + dx, sigma, &mut col_profile);
                    for (d, c) in deposit.iter_mut().zip(&col_profile) {
                        *d += amp * c;
                    }
                    any = true;
                }
                if !any {
                    continue;
                }
                gaussian_profile(h, cy + dy, sigma, &mut row_profile);
                for (r, &ry) in row_profile.iter().enumerate() {
                    if ry < 1e-7 {
                        continue;
                    }
                    for (px, &d) in frame[r * w..][..w].iter_mut().zip(&deposit) {
                        *px += ry * d;
                    }
                }
            }
            if let Some(hot) = &params.hot_region {
                if hot.contains(line, j) {
                    frame.iter_mut().for_each(|v| *v += hot.bias_c);
                }
            }
            if params.noise_sigma > 0.0 {
                for v in frame.iter_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
        }
    }

    Ok(LayerSequence {
        layer_id,
        column_id: 0,
        lines: params.lines_per_layer,
        frames_per_line: fpl,
        height: h,
        width: w,
        frames,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ProcessParams {
        ProcessParams {
            lines_per_layer: 12,
            frames_per_line: 6,
            frame_height: 16,
            frame_width: 16,
            spot_sigma: 1.5,
            seed: 7,
            ..ProcessParams::default()
        }
    }

    #[test]
    fn frame_count_matches_geometry() {
        let p = ProcessParams {
            frame_height: 4,
            frame_width: 4,
            ..ProcessParams::default()
        };
        let layer = generate_layer(&p, &FaultSchedule::default(), 0).unwrap();
        assert_eq!(layer.frame_count(), 8600);
        assert_eq!(layer.frames.len(), 8600 * 16);
    }

    #[test]
    fn zero_power_gives_ambient() {
        let p = ProcessParams {
            spot_peak_gain: 0.0,
            noise_sigma: 0.0,
            ..small()
        };
        let layer = generate_layer(&p, &FaultSchedule::default(), 3).unwrap();
        assert!(layer.frames.iter().all(|&v| v == p.ambient_temp));
    }

    #[test]
    fn faults_outside_layer_are_rejected() {
        let p = small();
        let sched = FaultSchedule {
            entries: vec![FaultEntry {
                layer_id: 1,
                start_line: 10,
                duration_lines: 4,
                off_nominal_power: 0.5,
            }],
        };
        assert!(generate_layer(&p, &sched, 1).is_err());
        // other layers ignore it
        assert!(generate_layer(&p, &sched, 2).is_ok());

        let long = FaultSchedule {
            entries: vec![FaultEntry {
                layer_id: 0,
                start_line: 0,
                duration_lines: 5,
                off_nominal_power: 0.5,
            }],
        };
        assert!(generate_layer(&p, &long, 0).is_err());
    }

    #[test]
    fn labels_are_exactly_the_off_nominal_lines() {
        let p = small();
        let sched = FaultSchedule {
            entries: FaultPattern {
                events: vec![(2, 1), (6, 3)],
            }
            .schedule(4, 0.48),
        };
        let layer = generate_layer(&p, &sched, 4).unwrap();
        assert_eq!(layer.labels.iter().copied().collect::<Vec<_>>(), vec![2, 6, 7, 8]);
    }

    #[test]
    fn deterministic_per_seed_and_layer() {
        let p = small();
        let a = generate_layer(&p, &FaultSchedule::default(), 1).unwrap();
        let b = generate_layer(&p, &FaultSchedule::default(), 1).unwrap();
        assert_eq!(a, b);
        let c = generate_layer(&p, &FaultSchedule::default(), 2).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn centre_temperature_increases_with_power() {
        let centre = |power: f32| {
            let p = ProcessParams {
                nominal_power: power,
                noise_sigma: 0.0,
                ..small()
            };
            let layer = generate_layer(&p, &FaultSchedule::default(), 0).unwrap();
            let f = layer.frame(8, 4);
            f[8 * 16 + 8]
        };
        let mut last = f32::NEG_INFINITY;
        for power in [0.1, 0.3, 0.48, 0.58, 0.61, 0.9, 1.0] {
            let t = centre(power);
            assert!(t > last, "power {power}: {t} <= {last}");
            last = t;
        }
    }

    #[test]
    fn hot_region_adds_exact_bias() {
        let p = ProcessParams {
            noise_sigma: 0.0,
            hot_region: Some(HotRegion {
                lines: 6..9,
                frames: 2..5,
                bias_c: 2.0,
            }),
            ..small()
        };
        let layer = generate_layer(&p, &FaultSchedule::default(), 0).unwrap();
        // same frame index, lines far enough from line 0 to share history
        let inside = layer.frame(7, 3);
        let outside = layer.frame(10, 3);
        for (a, b) in inside.iter().zip(outside) {
            assert!((a - b - 2.0).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn evenly_spaced_pattern_cycles_durations() {
        let pat = FaultPattern::evenly_spaced(215, 8);
        assert_eq!(pat.events.len(), 8);
        assert_eq!(pat.events[0], (23, 1));
        assert_eq!(pat.events[3].1, 4);
        assert_eq!(pat.events[4].1, 1);
        assert!(pat.events.iter().all(|&(s, d)| s + d <= 215));
    }

    #[test]
    fn invalid_params_rejected() {
        for p in [
            ProcessParams {
                trail_decay: 1.0,
                ..small()
            },
            ProcessParams {
                nominal_power: 0.0,
                ..small()
            },
            ProcessParams {
                frames_per_line: 0,
                ..small()
            },
        ] {
            assert!(generate_layer(&p, &FaultSchedule::default(), 0).is_err());
        }
        assert!(small().validate(13).is_err());
    }
}
