// SPDX-License-Identifier: Apache-2.0

//! File formats: TOML experiment configs, plain-text pulse files and CSV
//! tables.
//!
//! # Config
//!
//! ```toml
//! electron_offset_mhz = 0.0
//! t2e_us = 2.3
//! linewidth_mhz = 14.0
//!
//! [[nuclei]]
//! label = "H"
//! larmor_mhz = 14.09
//! a_mhz = -41.8
//! b_mhz = 19.7
//!
//! [grape]              # every section and key below is optional
//! duration_us = 0.8
//! dt_us = 0.001
//! amp_max_mhz = 28.0
//! max_iters = 2000
//! fidelity_goal = 0.98
//! ensemble_points = 5
//! manifold = "down"
//! seed = 1
//!
//! [double_coherence]
//! tau_max_us = 0.5
//! tau_step_us = 0.002
//!
//! [eseem]
//! tau1_us = 0.1
//! t_max_us = 4.0
//! t_step_us = 0.004
//!
//! [spectrum]
//! offset_min_mhz = -150.0
//! offset_max_mhz = 150.0
//! offset_step_mhz = 0.25
//!
//! [resonator]
//! center_ghz = 9.1875
//! q_factor = 65.0
//! max_drive_mhz = 28.0
//! gain = 0.5
//! max_iters = 200
//! tol_mhz = 1e-6
//!
//! [[measured]]          # inputs for Hamiltonian refinement
//! kind = "nuclear"      # or "double_coherence", "splitting"
//! nucleus = 0
//! manifold = "up"
//! value_mhz = 11.99
//! ```
//!
//! # Pulse files
//!
//! One segment per line, `index amp_x_mhz amp_y_mhz`, after `#` header
//! lines of which one reads `# dt_us = <value>`. Numbers are written in
//! shortest round-trip form, so reading a written file reproduces the pulse
//! bit for bit.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::dynamics::{ShapedPulse, DEFAULT_DT};
use crate::error::{Error, Result};
use crate::experiments::{FrequencyLabel, MeasuredFrequency, SignalSeries, SpectrumPeak};
use crate::hardware::ResonatorModel;
use crate::spin_system::{Manifold, Nucleus, SpinSystem, TransitionKind, TransitionRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NucleusSpec {
    pub label: String,
    pub larmor_mhz: f64,
    pub a_mhz: f64,
    pub b_mhz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrapeSection {
    pub duration_us: f64,
    pub dt_us: f64,
    pub amp_max_mhz: f64,
    pub max_iters: usize,
    pub fidelity_goal: f64,
    pub ensemble_points: usize,
    pub manifold: Manifold,
    pub seed: u64,
}

impl Default for GrapeSection {
    fn default() -> Self {
        Self {
            duration_us: 0.8,
            dt_us: DEFAULT_DT,
            amp_max_mhz: 28.0,
            max_iters: 2000,
            fidelity_goal: 0.98,
            ensemble_points: 5,
            manifold: Manifold::Down,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoherenceSection {
    pub tau_max_us: f64,
    pub tau_step_us: f64,
}

impl Default for CoherenceSection {
    fn default() -> Self {
        // 2 µs at 2 ns: 0.5 MHz resolution, 250 MHz Nyquist
        Self {
            tau_max_us: 2.0,
            tau_step_us: 0.002,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EseemSection {
    pub tau1_us: f64,
    pub t_max_us: f64,
    pub t_step_us: f64,
}

impl Default for EseemSection {
    fn default() -> Self {
        Self {
            tau1_us: 0.1,
            t_max_us: 4.0,
            t_step_us: 0.004,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumSection {
    pub offset_min_mhz: f64,
    pub offset_max_mhz: f64,
    pub offset_step_mhz: f64,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        Self {
            offset_min_mhz: -150.0,
            offset_max_mhz: 150.0,
            offset_step_mhz: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResonatorSection {
    pub center_ghz: f64,
    pub q_factor: f64,
    pub max_drive_mhz: f64,
    pub gain: f64,
    pub max_iters: usize,
    pub tol_mhz: f64,
}

impl Default for ResonatorSection {
    fn default() -> Self {
        let r = ResonatorModel::default();
        Self {
            center_ghz: r.center_freq,
            q_factor: r.q_factor,
            max_drive_mhz: r.max_drive,
            gain: 0.5,
            max_iters: 200,
            tol_mhz: 1e-6,
        }
    }
}

impl ResonatorSection {
    pub fn model(&self) -> Result<ResonatorModel> {
        ResonatorModel::new(self.center_ghz, self.q_factor, self.max_drive_mhz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasuredSpec {
    pub kind: MeasuredKind,
    #[serde(default)]
    pub nucleus: Option<usize>,
    #[serde(default)]
    pub manifold: Option<Manifold>,
    pub value_mhz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasuredKind {
    Nuclear,
    DoubleCoherence,
    Splitting,
}

impl MeasuredSpec {
    pub fn to_measured(&self) -> Result<MeasuredFrequency> {
        let need = |what: &str| Error::Parse(format!("{:?} measurement needs '{what}'", self.kind));
        let label = match self.kind {
            MeasuredKind::Nuclear => FrequencyLabel::Nuclear {
                nucleus: self.nucleus.ok_or_else(|| need("nucleus"))?,
                manifold: self.manifold.ok_or_else(|| need("manifold"))?,
            },
            MeasuredKind::DoubleCoherence => FrequencyLabel::DoubleCoherence {
                manifold: self.manifold.ok_or_else(|| need("manifold"))?,
            },
            MeasuredKind::Splitting => FrequencyLabel::Splitting {
                nucleus: self.nucleus.ok_or_else(|| need("nucleus"))?,
            },
        };
        Ok(MeasuredFrequency::new(label, self.value_mhz))
    }
}

/// A spin system plus optional experiment settings, as read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub electron_offset_mhz: f64,
    pub t2e_us: f64,
    pub linewidth_mhz: f64,
    pub nuclei: Vec<NucleusSpec>,
    #[serde(default)]
    pub grape: GrapeSection,
    #[serde(default)]
    pub double_coherence: CoherenceSection,
    #[serde(default)]
    pub eseem: EseemSection,
    #[serde(default)]
    pub spectrum: SpectrumSection,
    #[serde(default)]
    pub resonator: ResonatorSection,
    #[serde(default)]
    pub measured: Vec<MeasuredSpec>,
}

impl ExperimentConfig {
    /// Default settings around a given system.
    pub fn for_system(sys: &SpinSystem) -> Self {
        Self {
            electron_offset_mhz: sys.electron_offset,
            t2e_us: sys.t2e,
            linewidth_mhz: sys.t2e_star_linewidth,
            nuclei: sys
                .nuclei
                .iter()
                .map(|n| NucleusSpec {
                    label: n.label.clone(),
                    larmor_mhz: n.larmor,
                    a_mhz: n.a_coeff,
                    b_mhz: n.b_coeff,
                })
                .collect(),
            grape: GrapeSection::default(),
            double_coherence: CoherenceSection::default(),
            eseem: EseemSection::default(),
            spectrum: SpectrumSection::default(),
            resonator: ResonatorSection::default(),
            measured: Vec::new(),
        }
    }

    pub fn system(&self) -> Result<SpinSystem> {
        SpinSystem::new(
            self.electron_offset_mhz,
            self.nuclei
                .iter()
                .map(|n| Nucleus::new(n.label.clone(), n.larmor_mhz, n.a_mhz, n.b_mhz))
                .collect(),
            self.t2e_us,
            self.linewidth_mhz,
        )
    }

    pub fn measured_frequencies(&self) -> Result<Vec<MeasuredFrequency>> {
        self.measured.iter().map(MeasuredSpec::to_measured).collect()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.system()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Writes a pulse file.
pub fn write_pulse(mut w: impl Write, pulse: &ShapedPulse) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "# hyperspin pulse");
    let _ = writeln!(text, "# dt_us = {:?}", pulse.dt);
    let _ = writeln!(text, "# index amp_x_mhz amp_y_mhz");
    for k in 0..pulse.len() {
        let _ = writeln!(text, "{k} {:?} {:?}", pulse.amp_x[k], pulse.amp_y[k]);
    }
    w.write_all(text.as_bytes()).map_err(|e| Error::Parse(e.to_string()))
}

/// Reads a pulse file written by [`write_pulse`] (or by hand in the same
/// layout). Indices must run 0, 1, 2, … in order.
pub fn read_pulse(r: impl BufRead) -> Result<ShapedPulse> {
    let mut dt = None;
    let (mut ax, mut ay) = (Vec::new(), Vec::new());
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse(e.to_string()))?;
        let line = line.trim();
        let bad = |msg: &str| Error::Parse(format!("line {}: {msg}", lineno + 1));
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(value) = comment.trim().strip_prefix("dt_us") {
                let value = value
                    .trim()
                    .strip_prefix('=')
                    .ok_or_else(|| bad("malformed dt header"))?;
                dt = Some(value.trim().parse::<f64>().map_err(|_| bad("unreadable dt"))?);
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(bad("expected 'index amp_x amp_y'"));
        }
        let index: usize = fields[0].parse().map_err(|_| bad("bad index"))?;
        if index != ax.len() {
            return Err(bad("segment indices must be consecutive from 0"));
        }
        ax.push(fields[1].parse::<f64>().map_err(|_| bad("bad amp_x"))?);
        ay.push(fields[2].parse::<f64>().map_err(|_| bad("bad amp_y"))?);
    }
    let dt = dt.ok_or_else(|| Error::Parse("missing '# dt_us = …' header".into()))?;
    ShapedPulse::new(dt, ax, ay)
}

/// `x` with `digits` significant digits, trailing zeros dropped.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if exp < -5 || exp >= digits as i32 {
        format!("{}e{exp}", trim(mantissa))
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim(&format!("{x:.decimals$}"))
    }
}

/// Significant digits used in every CSV table.
pub const CSV_DIGITS: usize = 12;

fn csv_num(x: f64) -> String {
    format_sig(x, CSV_DIGITS)
}

fn write_text(mut w: impl Write, text: &str) -> Result<()> {
    w.write_all(text.as_bytes()).map_err(|e| Error::Parse(e.to_string()))
}

/// Two columns: the sample abscissa and value.
pub fn write_signal_csv(w: impl Write, series: &SignalSeries, x_name: &str, y_name: &str) -> Result<()> {
    let mut text = format!("{x_name},{y_name}\n");
    for (k, v) in series.values.iter().enumerate() {
        let _ = writeln!(text, "{},{}", csv_num(series.axis(k)), csv_num(*v));
    }
    write_text(w, &text)
}

/// Columns `frequency_mhz,amplitude,width_mhz`.
pub fn write_peaks_csv(w: impl Write, peaks: &[SpectrumPeak]) -> Result<()> {
    let mut text = String::from("frequency_mhz,amplitude,width_mhz\n");
    for p in peaks {
        let _ = writeln!(
            text,
            "{},{},{}",
            csv_num(p.frequency),
            csv_num(p.amplitude),
            csv_num(p.width)
        );
    }
    write_text(w, &text)
}

/// Columns `from_level,to_level,kind,frequency_mhz,intensity`.
pub fn write_transitions_csv(w: impl Write, table: &[TransitionRecord]) -> Result<()> {
    let mut text = String::from("from_level,to_level,kind,frequency_mhz,intensity\n");
    for t in table {
        let kind = match t.kind {
            TransitionKind::Allowed => "allowed",
            TransitionKind::Forbidden => "forbidden",
            TransitionKind::Nuclear => "nuclear",
        };
        let _ = writeln!(
            text,
            "{},{},{kind},{},{}",
            t.from_level,
            t.to_level,
            csv_num(t.frequency),
            csv_num(t.intensity)
        );
    }
    write_text(w, &text)
}

/// Key/value rows, for scalar results.
pub fn write_summary_csv(w: impl Write, rows: &[(&str, f64)]) -> Result<()> {
    let mut text = String::from("quantity,value\n");
    for (k, v) in rows {
        let _ = writeln!(text, "{k},{}", csv_num(*v));
    }
    write_text(w, &text)
}
