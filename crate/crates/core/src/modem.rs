//! Concentration shift keying over a T-junction flow channel.
//!
//! Each transmitter drives an information pump and a solvent pump whose summed
//! flow is constant. Bits are mapped to flow levels, the streams of all
//! transmitters dilute each other at the junction, the receiver samples
//! spectra of the mixture, and demodulation averages per-frame concentration
//! estimates with known (genie) timing and picks the nearest reference level.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::noise::{apply_sensor_noise, NoiseParams, RandomSource};
use crate::predict::ConcentrationEstimator;
use crate::scalar::Real;
use crate::spectral::{absorbance_mix, AbsorbanceSpectrum, ConcentrationVector, ExtinctionProfileSet, PathLength};

/// Slack used when comparing times and flows.
const TIME_TOL: f64 = 1e-9;

/// MSB-first 7-bit codes of an ASCII string.
pub fn ascii7_encode(text: &str) -> Result<Vec<u8>> {
    let mut bits = Vec::with_capacity(7 * text.len());
    for ch in text.chars() {
        if !ch.is_ascii() {
            return usage(format!("character {ch:?} is not 7-bit ASCII"));
        }
        let code = ch as u8;
        bits.extend((0..7).rev().map(|k| (code >> k) & 1));
    }
    Ok(bits)
}

pub fn ascii7_decode(bits: &[u8]) -> Result<String> {
    if !bits.len().is_multiple_of(7) {
        return usage(format!("{} bits is not a whole number of 7-bit characters", bits.len()));
    }
    check_bits(bits)?;
    Ok(bits.chunks(7).map(|c| c.iter().fold(0u8, |acc, &b| (acc << 1) | b) as char).collect())
}

fn check_bits(bits: &[u8]) -> Result<()> {
    match bits.iter().find(|&&b| b > 1) {
        Some(b) => usage(format!("bit value {b} is not 0 or 1")),
        None => Ok(()),
    }
}

/// Parses a string of `0`/`1` characters.
pub fn parse_bits(text: &str) -> Result<Vec<u8>> {
    text.chars()
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            other => usage(format!("invalid bit character {other:?}")),
        })
        .collect()
}

pub fn format_bits(bits: &[u8]) -> String {
    bits.iter().map(|&b| if b == 0 { '0' } else { '1' }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Bcsk,
    Qcsk,
}

impl Scheme {
    pub fn bits_per_symbol(self) -> usize {
        match self {
            Scheme::Bcsk => 1,
            Scheme::Qcsk => 2,
        }
    }

    pub fn level_count(self) -> usize {
        1 << self.bits_per_symbol()
    }
}

/// Level indices for a bit string; QCSK pairs are read high bit first.
pub fn bits_to_levels(scheme: Scheme, bits: &[u8]) -> Result<Vec<usize>> {
    check_bits(bits)?;
    let k = scheme.bits_per_symbol();
    if !bits.len().is_multiple_of(k) {
        return usage(format!("{:?} needs a multiple of {k} bits, got {}", scheme, bits.len()));
    }
    Ok(bits.chunks(k).map(|c| c.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize)).collect())
}

pub fn levels_to_bits(scheme: Scheme, levels: &[usize]) -> Vec<u8> {
    let k = scheme.bits_per_symbol();
    levels.iter().flat_map(|&l| (0..k).rev().map(move |j| ((l >> j) & 1) as u8)).collect()
}

/// Pairs two equal-length sequences into a dibit stream `a0 b0 a1 b1 ...`.
pub fn interleave_dibits(seq_a: &[u8], seq_b: &[u8]) -> Result<Vec<u8>> {
    if seq_a.len() != seq_b.len() {
        return usage(format!("dibit sequences differ in length: {} vs {}", seq_a.len(), seq_b.len()));
    }
    check_bits(seq_a)?;
    check_bits(seq_b)?;
    Ok(seq_a.iter().zip(seq_b).flat_map(|(&a, &b)| [a, b]).collect())
}

/// Inverse of [`interleave_dibits`].
pub fn deinterleave_dibits(stream: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    if !stream.len().is_multiple_of(2) {
        return usage("dibit stream has odd length");
    }
    Ok((stream.iter().step_by(2).copied().collect(), stream.iter().skip(1).step_by(2).copied().collect()))
}

/// Bits carried by one transmitter for a text message. QCSK transmitters send
/// consecutive character pairs as interleaved dibits.
pub fn message_bits(scheme: Scheme, text: &str) -> Result<Vec<u8>> {
    match scheme {
        Scheme::Bcsk => ascii7_encode(text),
        Scheme::Qcsk => {
            let chars: Vec<char> = text.chars().collect();
            if !chars.len().is_multiple_of(2) {
                return usage(format!("QCSK message {text:?} needs an even number of characters"));
            }
            let mut out = Vec::new();
            for pair in chars.chunks(2) {
                let a = ascii7_encode(&pair[0].to_string())?;
                let b = ascii7_encode(&pair[1].to_string())?;
                out.extend(interleave_dibits(&a, &b)?);
            }
            Ok(out)
        }
    }
}

/// Inverse of [`message_bits`].
pub fn bits_to_message(scheme: Scheme, bits: &[u8]) -> Result<String> {
    match scheme {
        Scheme::Bcsk => ascii7_decode(bits),
        Scheme::Qcsk => {
            if !bits.len().is_multiple_of(14) {
                return usage(format!("{} bits is not a whole number of QCSK character pairs", bits.len()));
            }
            let mut text = String::new();
            for chunk in bits.chunks(14) {
                let (a, b) = deinterleave_dibits(chunk)?;
                text.push_str(&ascii7_decode(&a)?);
                text.push_str(&ascii7_decode(&b)?);
            }
            Ok(text)
        }
    }
}

/// Information and solvent pump rates in µL/min.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelFlow {
    pub info: f64,
    pub solvent: f64,
}

impl LevelFlow {
    pub fn total(&self) -> f64 {
        self.info + self.solvent
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransmitterConfig {
    #[serde(default)]
    pub name: String,
    /// Index of the emitted molecule in the receiver's species order.
    pub species: usize,
    /// Stock concentration in the information syringe, mol/L.
    pub stock_concentration: f64,
    pub bit_interval_s: f64,
    #[serde(default = "default_duty_cycle")]
    pub duty_cycle: f64,
    #[serde(default)]
    pub start_offset_s: f64,
    pub scheme: Scheme,
    /// Flow pair per level, indexed by level.
    pub level_flows: Vec<LevelFlow>,
}

fn default_duty_cycle() -> f64 {
    1.0
}

impl TransmitterConfig {
    /// BCSK with the information pump at `flow` for bit 1 and the solvent pump at `flow` for bit 0.
    pub fn bcsk(name: &str, species: usize, stock: f64, flow: f64, bit_interval_s: f64, offset_s: f64) -> Self {
        Self {
            name: name.into(),
            species,
            stock_concentration: stock,
            bit_interval_s,
            duty_cycle: 1.0,
            start_offset_s: offset_s,
            scheme: Scheme::Bcsk,
            level_flows: vec![LevelFlow { info: 0.0, solvent: flow }, LevelFlow { info: flow, solvent: 0.0 }],
        }
    }

    /// QCSK with the four-level flow table 0/60, 20/40, 40/20, 60/0 µL/min.
    pub fn qcsk(name: &str, species: usize, stock: f64, bit_interval_s: f64, offset_s: f64) -> Self {
        Self {
            name: name.into(),
            species,
            stock_concentration: stock,
            bit_interval_s,
            duty_cycle: 1.0,
            start_offset_s: offset_s,
            scheme: Scheme::Qcsk,
            level_flows: (0..4).map(|k| LevelFlow { info: 20.0 * k as f64, solvent: 60.0 - 20.0 * k as f64 }).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let who = if self.name.is_empty() { "transmitter" } else { self.name.as_str() };
        if !(self.bit_interval_s > 0.0 && self.bit_interval_s.is_finite()) {
            return usage(format!("{who}: bit interval must be positive"));
        }
        if !(self.duty_cycle > 0.0 && self.duty_cycle <= 1.0) {
            return usage(format!("{who}: duty cycle must lie in (0, 1]"));
        }
        if !(self.start_offset_s >= 0.0 && self.start_offset_s.is_finite()) {
            return usage(format!("{who}: start offset must be nonnegative"));
        }
        if !(self.stock_concentration >= 0.0 && self.stock_concentration.is_finite()) {
            return usage(format!("{who}: stock concentration must be nonnegative"));
        }
        if self.level_flows.len() != self.scheme.level_count() {
            return usage(format!(
                "{who}: {:?} needs {} levels, got {}",
                self.scheme,
                self.scheme.level_count(),
                self.level_flows.len()
            ));
        }
        if self.level_flows.iter().any(|f| !(f.info >= 0.0 && f.solvent >= 0.0)) {
            return usage(format!("{who}: flows must be nonnegative"));
        }
        let total = self.total_flow();
        if !(total > 0.0) || self.level_flows.iter().any(|f| (f.total() - total).abs() > TIME_TOL * total) {
            return usage(format!("{who}: every level must have the same positive total flow"));
        }
        Ok(())
    }

    /// Constant info + solvent flow in µL/min.
    pub fn total_flow(&self) -> f64 {
        self.level_flows[0].total()
    }

    fn idle(&self) -> LevelFlow {
        LevelFlow { info: 0.0, solvent: self.total_flow() }
    }
}

/// Piecewise-constant flows `[start_s, end_s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowSegment {
    pub start_s: f64,
    pub end_s: f64,
    pub flow: LevelFlow,
}

/// Pump schedule of one transmitter; outside its segments the transmitter idles
/// with only the solvent pump running at the total flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTrace {
    pub segments: Vec<FlowSegment>,
    pub idle: LevelFlow,
}

impl FlowTrace {
    /// End of the last segment (0 for an empty trace).
    pub fn horizon_s(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.end_s)
    }

    pub fn flow_at(&self, t: f64) -> LevelFlow {
        self.segments.iter().find(|s| s.start_s <= t && t < s.end_s).map_or(self.idle, |s| s.flow)
    }

    fn breakpoints(&self) -> impl Iterator<Item = f64> + '_ {
        self.segments.iter().flat_map(|s| [s.start_s, s.end_s])
    }
}

/// Pump schedule for a sequence of level indices.
pub fn encode_levels(tx: &TransmitterConfig, levels: &[usize]) -> Result<FlowTrace> {
    tx.validate()?;
    let idle = tx.idle();
    let mut segments = Vec::new();
    if levels.is_empty() {
        return Ok(FlowTrace { segments, idle });
    }
    if tx.start_offset_s > 0.0 {
        segments.push(FlowSegment { start_s: 0.0, end_s: tx.start_offset_s, flow: idle });
    }
    for (k, &level) in levels.iter().enumerate() {
        let flow = *tx
            .level_flows
            .get(level)
            .ok_or_else(|| Error::Usage(format!("level {level} outside {:?} table", tx.scheme)))?;
        let start = tx.start_offset_s + k as f64 * tx.bit_interval_s;
        let end = start + tx.bit_interval_s;
        if tx.duty_cycle < 1.0 {
            let on_end = start + tx.duty_cycle * tx.bit_interval_s;
            segments.push(FlowSegment { start_s: start, end_s: on_end, flow });
            segments.push(FlowSegment { start_s: on_end, end_s: end, flow: idle });
        } else {
            segments.push(FlowSegment { start_s: start, end_s: end, flow });
        }
    }
    Ok(FlowTrace { segments, idle })
}

pub fn encode_bits(tx: &TransmitterConfig, bits: &[u8]) -> Result<FlowTrace> {
    encode_levels(tx, &bits_to_levels(tx.scheme, bits)?)
}

/// Piecewise-constant receiver concentrations: `values[k]` holds on `[starts[k], starts[k + 1])`
/// and the last entry holds until `horizon_s` and beyond.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationSeries {
    pub starts: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub horizon_s: f64,
}

impl ConcentrationSeries {
    pub fn at(&self, t: f64) -> &[f64] {
        let k = self.starts.partition_point(|&s| s <= t).saturating_sub(1);
        &self.values[k]
    }
}

/// Receiver concentration of one transmitter's molecule: `stock * q_info / q_total`,
/// where `q_total` sums every pump of every transmitter.
pub fn dilute(stock: f64, q_info: f64, q_total: f64) -> Result<f64> {
    if !(q_total > 0.0) {
        return Err(Error::Domain("total flow at the junction is zero".into()));
    }
    Ok(stock * q_info / q_total)
}

pub fn mix_at_junction(
    txs: &[TransmitterConfig],
    traces: &[FlowTrace],
    species_count: usize,
) -> Result<ConcentrationSeries> {
    if txs.len() != traces.len() {
        return usage(format!("{} transmitters for {} flow traces", txs.len(), traces.len()));
    }
    if let Some(tx) = txs.iter().find(|tx| tx.species >= species_count) {
        return usage(format!("transmitter species index {} outside {species_count} species", tx.species));
    }
    let mut starts: Vec<f64> = std::iter::once(0.0).chain(traces.iter().flat_map(|t| t.breakpoints())).collect();
    starts.sort_by(f64::total_cmp);
    starts.dedup_by(|a, b| (*a - *b).abs() <= TIME_TOL);
    let horizon_s = traces.iter().map(FlowTrace::horizon_s).fold(0.0, f64::max);
    let mut values = Vec::with_capacity(starts.len());
    for &t in &starts {
        let flows: Vec<LevelFlow> = traces.iter().map(|tr| tr.flow_at(t)).collect();
        let q_total: f64 = flows.iter().map(LevelFlow::total).sum();
        let mut c = vec![0.0; species_count];
        for (tx, f) in txs.iter().zip(&flows) {
            c[tx.species] += dilute(tx.stock_concentration, f.info, q_total)?;
        }
        values.push(c);
    }
    Ok(ConcentrationSeries { starts, values, horizon_s })
}

/// Expected receiver concentration of every level of every transmitter when all
/// transmitters run at their constant total flows.
pub fn reference_levels(txs: &[TransmitterConfig]) -> Result<Vec<Vec<f64>>> {
    let q_total: f64 = txs.iter().map(TransmitterConfig::total_flow).sum();
    txs.iter()
        .map(|tx| tx.level_flows.iter().map(|f| dilute(tx.stock_concentration, f.info, q_total)).collect())
        .collect()
}

/// Receiver-side observation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    pub sampling_period_s: f64,
    /// First-order lag time constant; 0 gives ideal rectangular transitions.
    pub tau_s: f64,
    pub noise: Option<NoiseParams>,
    pub path_length_cm: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            sampling_period_s: 10.0,
            tau_s: 0.0,
            noise: Some(NoiseParams::default()),
            path_length_cm: crate::spectral::DEFAULT_PATH_LENGTH_CM,
        }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sampling_period_s > 0.0 && self.sampling_period_s.is_finite()) {
            return usage("sampling period must be positive");
        }
        if !(self.tau_s >= 0.0 && self.tau_s.is_finite()) {
            return usage("tau must be nonnegative");
        }
        if let Some(n) = &self.noise {
            n.validate()?;
        }
        Ok(())
    }
}

/// Sample times `0, dt, 2 dt, ...` strictly before `horizon_s`.
pub fn sample_times(horizon_s: f64, dt: f64) -> Vec<f64> {
    (0..).map(|k| k as f64 * dt).take_while(|&t| t < horizon_s - TIME_TOL).collect()
}

/// Concentrations seen through a first-order lag `tau dy/dt = x - y` with `y(0) = x(0)`,
/// evaluated exactly between breakpoints.
pub fn lagged_concentrations(series: &ConcentrationSeries, times: &[f64], tau_s: f64) -> Vec<Vec<f64>> {
    if tau_s == 0.0 {
        return times.iter().map(|&t| series.at(t).to_vec()).collect();
    }
    let mut y = series.values[0].clone();
    let mut now = 0.0;
    let mut out = Vec::with_capacity(times.len());
    let advance = |y: &mut Vec<f64>, x: &[f64], dt: f64| {
        let decay = (-dt / tau_s).exp();
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi = xi + (*yi - xi) * decay;
        }
    };
    for &t in times {
        // step through every breakpoint between `now` and `t`
        while let Some(&b) = series.starts.iter().find(|&&b| b > now && b <= t) {
            advance(&mut y, series.at(now), b - now);
            now = b;
        }
        advance(&mut y, series.at(now), t - now);
        now = t;
        out.push(y.clone());
    }
    out
}

/// Spectra sampled at the receiver together with the concentrations that produced them.
#[derive(Debug, Clone)]
pub struct Observation<T> {
    pub times_s: Vec<f64>,
    pub horizon_s: f64,
    pub true_concentrations: Vec<Vec<f64>>,
    pub spectra: Vec<AbsorbanceSpectrum<T>>,
}

pub fn channel_observe<T: Real>(
    series: &ConcentrationSeries,
    link: &LinkConfig,
    eps: &ExtinctionProfileSet<T>,
    rng: &mut RandomSource,
) -> Result<Observation<T>> {
    link.validate()?;
    let times_s = sample_times(series.horizon_s, link.sampling_period_s);
    let true_concentrations = lagged_concentrations(series, &times_s, link.tau_s);
    let path = PathLength::new(T::lit(link.path_length_cm))?;
    let mut spectra = Vec::with_capacity(times_s.len());
    for c in &true_concentrations {
        let conc = ConcentrationVector(c.iter().map(|&v| T::lit(v)).collect());
        let clean = absorbance_mix(eps, &conc, path)?;
        spectra.push(match &link.noise {
            Some(p) => apply_sensor_noise(&clean, p, rng)?,
            None => clean,
        });
    }
    Ok(Observation { times_s, horizon_s: series.horizon_s, true_concentrations, spectra })
}

/// Nearest level by absolute distance; ties go to the lower level.
pub fn decide_level(value: f64, levels: &[f64]) -> usize {
    let mut best = 0;
    for (k, &l) in levels.iter().enumerate() {
        if (value - l).abs() < (value - levels[best]).abs() {
            best = k;
        }
    }
    best
}

/// One decided symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDecision {
    pub transmitter: usize,
    pub frame: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub samples: usize,
    pub mean_concentration: f64,
    pub level: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedStream {
    pub name: String,
    pub bits: Vec<u8>,
    pub levels: Vec<usize>,
    /// Mean detected concentration per frame, mol/L.
    pub frame_means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedMessage {
    pub streams: Vec<DecodedStream>,
    pub decisions: Vec<FrameDecision>,
}

impl DecodedMessage {
    pub fn all_bits(&self) -> Vec<u8> {
        self.streams.iter().flat_map(|s| s.bits.iter().copied()).collect()
    }
}

/// Genie-timed demodulation from per-sample concentration estimates (mol/L,
/// `[sample][species]`). `frames[i]` is the symbol count of transmitter `i`.
pub fn demodulate_estimates(
    times_s: &[f64],
    horizon_s: f64,
    estimates: &[Vec<f64>],
    txs: &[TransmitterConfig],
    frames: &[usize],
    levels: &[Vec<f64>],
) -> Result<DecodedMessage> {
    if txs.len() != frames.len() || txs.len() != levels.len() {
        return usage("transmitters, frame counts and level tables must have equal length");
    }
    if times_s.len() != estimates.len() {
        return usage(format!("{} sample times for {} estimates", times_s.len(), estimates.len()));
    }
    let mut streams = Vec::with_capacity(txs.len());
    let mut decisions = Vec::new();
    for (i, ((tx, &n), lv)) in txs.iter().zip(frames).zip(levels).enumerate() {
        if lv.len() != tx.scheme.level_count() {
            return usage(format!("transmitter {i} has {} reference levels", lv.len()));
        }
        let mut stream = DecodedStream { name: tx.name.clone(), bits: vec![], levels: vec![], frame_means: vec![] };
        for k in 0..n {
            let start = tx.start_offset_s + k as f64 * tx.bit_interval_s;
            let end = start + tx.bit_interval_s;
            if end > horizon_s + TIME_TOL {
                return usage(format!(
                    "frame {k} of transmitter {i} ends at {end} s, past the series end {horizon_s} s"
                ));
            }
            let in_frame: Vec<f64> = times_s
                .iter()
                .zip(estimates)
                .filter(|(&t, _)| t >= start - TIME_TOL && t < end - TIME_TOL)
                .map(|(_, e)| e[tx.species])
                .collect();
            if in_frame.is_empty() {
                return usage(format!("frame {k} of transmitter {i} contains no samples"));
            }
            let mean = in_frame.iter().sum::<f64>() / in_frame.len() as f64;
            let level = decide_level(mean, lv);
            stream.levels.push(level);
            stream.frame_means.push(mean);
            decisions.push(FrameDecision {
                transmitter: i,
                frame: k,
                start_s: start,
                end_s: end,
                samples: in_frame.len(),
                mean_concentration: mean,
                level,
            });
        }
        stream.bits = levels_to_bits(tx.scheme, &stream.levels);
        streams.push(stream);
    }
    Ok(DecodedMessage { streams, decisions })
}

/// Runs the estimator over every observed spectrum, then demodulates.
pub fn demodulate<T: Real, E: ConcentrationEstimator<T> + ?Sized>(
    est: &E,
    obs: &Observation<T>,
    txs: &[TransmitterConfig],
    frames: &[usize],
    levels: &[Vec<f64>],
) -> Result<DecodedMessage> {
    let estimates = estimate_series(est, &obs.spectra)?;
    demodulate_estimates(&obs.times_s, obs.horizon_s, &estimates, txs, frames, levels)
}

pub fn estimate_series<T: Real, E: ConcentrationEstimator<T> + ?Sized>(
    est: &E,
    spectra: &[AbsorbanceSpectrum<T>],
) -> Result<Vec<Vec<f64>>> {
    spectra.iter().map(|s| Ok(est.estimate(s)?.values().iter().map(|v| v.as_f64()).collect())).collect()
}

/// Hamming distance over length.
pub fn ber(decoded: &[u8], truth: &[u8]) -> Result<f64> {
    if decoded.len() != truth.len() {
        return usage(format!("{} decoded bits for {} transmitted", decoded.len(), truth.len()));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let errors = decoded.iter().zip(truth).filter(|(a, b)| a != b).count();
    Ok(errors as f64 / truth.len() as f64)
}

/// A transmitter together with the text it sends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmitterSetup {
    pub message: String,
    #[serde(flatten)]
    pub config: TransmitterConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkScenario {
    pub transmitters: Vec<TransmitterSetup>,
    #[serde(default)]
    pub link: LinkConfig,
}

/// BCSK stock concentrations: IC 2.18e-5 and NR 1.15e-4 mol/L.
pub const BCSK_STOCKS: [f64; 2] = [2.18e-5, 1.15e-4];
/// QCSK stock concentrations: IC 7.2e-5 and NR 1.72e-4 mol/L.
pub const QCSK_STOCKS: [f64; 2] = [7.2e-5, 1.72e-4];
/// Bit interval of the synchronized presets after time scaling.
pub const PRESET_BIT_INTERVAL_S: f64 = 60.0;

impl LinkScenario {
    /// Two synchronized BCSK transmitters sending "H" (IC) and "i" (NR) at 40 µL/min.
    pub fn bcsk_sync() -> Self {
        let t = PRESET_BIT_INTERVAL_S;
        Self {
            transmitters: vec![
                TransmitterSetup {
                    message: "H".into(),
                    config: TransmitterConfig::bcsk("TX1", 0, BCSK_STOCKS[0], 40.0, t, 0.0),
                },
                TransmitterSetup {
                    message: "i".into(),
                    config: TransmitterConfig::bcsk("TX2", 1, BCSK_STOCKS[1], 40.0, t, 0.0),
                },
            ],
            link: LinkConfig::default(),
        }
    }

    /// BCSK with TX1 at 25 µL/min and a 100 s interval, TX2 at 40 µL/min and a 60 s
    /// interval, starting 20 s and 50 s into the run.
    pub fn bcsk_desync() -> Self {
        Self {
            transmitters: vec![
                TransmitterSetup {
                    message: "H".into(),
                    config: TransmitterConfig::bcsk("TX1", 0, BCSK_STOCKS[0], 25.0, 100.0, 20.0),
                },
                TransmitterSetup {
                    message: "i".into(),
                    config: TransmitterConfig::bcsk("TX2", 1, BCSK_STOCKS[1], 40.0, 60.0, 50.0),
                },
            ],
            link: LinkConfig::default(),
        }
    }

    /// Two synchronized QCSK transmitters sending "KC" (IC) and "L!" (NR).
    pub fn qcsk_sync() -> Self {
        let t = PRESET_BIT_INTERVAL_S;
        Self {
            transmitters: vec![
                TransmitterSetup {
                    message: "KC".into(),
                    config: TransmitterConfig::qcsk("TX1", 0, QCSK_STOCKS[0], t, 0.0),
                },
                TransmitterSetup {
                    message: "L!".into(),
                    config: TransmitterConfig::qcsk("TX2", 1, QCSK_STOCKS[1], t, 0.0),
                },
            ],
            link: LinkConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "bcsk_sync" => Some(Self::bcsk_sync()),
            "bcsk_desync" => Some(Self::bcsk_desync()),
            "qcsk_sync" => Some(Self::qcsk_sync()),
            _ => None,
        }
    }

    pub fn configs(&self) -> Vec<TransmitterConfig> {
        self.transmitters.iter().map(|t| t.config.clone()).collect()
    }

    pub fn message(&self) -> String {
        self.transmitters.iter().map(|t| t.message.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub name: String,
    pub sent_message: String,
    pub decoded_message: String,
    pub sent_bits: String,
    pub decoded_bits: String,
    pub symbols: usize,
    pub bit_errors: usize,
    pub ber: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSummary {
    pub message: String,
    pub decoded_message: String,
    pub bits: usize,
    pub symbols: usize,
    pub bit_errors: usize,
    pub ber: f64,
    pub decision_rule: String,
    pub timing: String,
    pub transmitters: Vec<StreamSummary>,
}

/// Everything produced by one simulated transmission.
#[derive(Debug, Clone)]
pub struct LinkRun<T> {
    pub observation: Observation<T>,
    pub estimates: Vec<Vec<f64>>,
    pub decoded: DecodedMessage,
    pub summary: LinkSummary,
}

/// encode -> mix -> observe -> demodulate for a scenario.
pub fn run_link<T: Real, E: ConcentrationEstimator<T> + ?Sized>(
    est: &E,
    scenario: &LinkScenario,
    eps: &ExtinctionProfileSet<T>,
    rng: &mut RandomSource,
) -> Result<LinkRun<T>> {
    if scenario.transmitters.is_empty() {
        return usage("scenario has no transmitters");
    }
    let txs = scenario.configs();
    let species = eps.species_count();
    if est.species_count() != species {
        return usage(format!("estimator has {} outputs, profiles {} species", est.species_count(), species));
    }
    let mut sent = Vec::with_capacity(txs.len());
    let mut traces = Vec::with_capacity(txs.len());
    for setup in &scenario.transmitters {
        let bits = message_bits(setup.config.scheme, &setup.message)?;
        traces.push(encode_bits(&setup.config, &bits)?);
        sent.push(bits);
    }
    let series = mix_at_junction(&txs, &traces, species)?;
    let observation = channel_observe(&series, &scenario.link, eps, rng)?;
    let estimates = estimate_series(est, &observation.spectra)?;
    let frames: Vec<usize> = txs.iter().zip(&sent).map(|(tx, b)| b.len() / tx.scheme.bits_per_symbol()).collect();
    let levels = reference_levels(&txs)?;
    let decoded =
        demodulate_estimates(&observation.times_s, observation.horizon_s, &estimates, &txs, &frames, &levels)?;

    let mut streams = Vec::with_capacity(txs.len());
    for ((setup, bits), stream) in scenario.transmitters.iter().zip(&sent).zip(&decoded.streams) {
        let errors = bits.iter().zip(&stream.bits).filter(|(a, b)| a != b).count();
        streams.push(StreamSummary {
            name: setup.config.name.clone(),
            sent_message: setup.message.clone(),
            decoded_message: bits_to_message(setup.config.scheme, &stream.bits)?,
            sent_bits: format_bits(bits),
            decoded_bits: format_bits(&stream.bits),
            symbols: stream.levels.len(),
            bit_errors: errors,
            ber: ber(&stream.bits, bits)?,
        });
    }
    let all_sent: Vec<u8> = sent.concat();
    let bit_errors = streams.iter().map(|s| s.bit_errors).sum();
    let summary = LinkSummary {
        message: scenario.message(),
        decoded_message: streams.iter().map(|s| s.decoded_message.as_str()).collect(),
        bits: all_sent.len(),
        symbols: streams.iter().map(|s| s.symbols).sum(),
        bit_errors,
        ber: ber(&decoded.all_bits(), &all_sent)?,
        decision_rule: "nearest reference level of the frame-mean estimate, ties to the lower level".into(),
        timing: "genie: known bit intervals and start offsets".into(),
        transmitters: streams,
    };
    Ok(LinkRun { observation, estimates, decoded, summary })
}

impl<T: Real> LinkRun<T> {
    /// `time_s, true_<species>..., pred_<species>...`
    pub fn write_trace_csv<W: Write>(&self, species: &[String], mut w: W) -> Result<()> {
        let mut header = vec!["time_s".to_string()];
        header.extend(species.iter().map(|s| format!("true_{s}")));
        header.extend(species.iter().map(|s| format!("pred_{s}")));
        writeln!(w, "{}", header.join(","))?;
        for ((t, c), p) in
            self.observation.times_s.iter().zip(&self.observation.true_concentrations).zip(&self.estimates)
        {
            let mut row = vec![format!("{t}")];
            row.extend(c.iter().chain(p).map(|v| format!("{v:.9e}")));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn write_decisions_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "transmitter,frame,start_s,end_s,samples,mean_concentration,level,bits")?;
        for d in &self.decoded.decisions {
            let stream = &self.decoded.streams[d.transmitter];
            let k = self.summary.transmitters[d.transmitter].symbols;
            let per = stream.bits.len().checked_div(k).unwrap_or(0);
            let bits = format_bits(&stream.bits[d.frame * per..(d.frame + 1) * per]);
            writeln!(
                w,
                "{},{},{},{},{},{:.9e},{},{}",
                stream.name, d.frame, d.start_s, d.end_s, d.samples, d.mean_concentration, d.level, bits
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::LeastSquaresUnmixer;
    use crate::spectral::{dye_stand_in_bands, synthetic_profile_set, WavelengthGrid};
    use proptest::prelude::*;
    use std::sync::Arc;

    #[test]
    fn ascii_codes() {
        assert_eq!(format_bits(&ascii7_encode("H").unwrap()), "1001000");
        assert_eq!(format_bits(&ascii7_encode("i").unwrap()), "1101001");
        assert_eq!(format_bits(&ascii7_encode("!").unwrap()), "0100001");
        assert_eq!(ascii7_decode(&ascii7_encode("KCL!").unwrap()).unwrap(), "KCL!");
        assert!(ascii7_encode("é").is_err());
        assert!(ascii7_decode(&[1, 0]).is_err());
    }

    #[test]
    fn dibit_levels() {
        let k = parse_bits("1001011").unwrap();
        let c = parse_bits("1000011").unwrap();
        let stream = interleave_dibits(&k, &c).unwrap();
        let oracle: Vec<usize> = k.iter().zip(&c).map(|(&a, &b)| 2 * a as usize + b as usize).collect();
        assert_eq!(bits_to_levels(Scheme::Qcsk, &stream).unwrap(), oracle);
        assert_eq!(oracle, vec![3, 0, 0, 2, 0, 3, 3]);
        assert_eq!(bits_to_levels(Scheme::Qcsk, &interleave_dibits(&[0], &[0]).unwrap()).unwrap(), vec![0]);
        assert_eq!(bits_to_levels(Scheme::Qcsk, &interleave_dibits(&[1], &[1]).unwrap()).unwrap(), vec![3]);
        assert!(interleave_dibits(&[1], &[1, 0]).is_err());
        assert!(bits_to_levels(Scheme::Qcsk, &[1, 0, 1]).is_err());
    }

    #[test]
    fn qcsk_message_round_trip() {
        let bits = message_bits(Scheme::Qcsk, "KC").unwrap();
        assert_eq!(bits.len(), 14);
        assert_eq!(bits_to_message(Scheme::Qcsk, &bits).unwrap(), "KC");
        assert!(message_bits(Scheme::Qcsk, "K").is_err());
    }

    #[test]
    fn encode_examples() {
        let tx = TransmitterConfig::bcsk("a", 0, 1.0, 40.0, 60.0, 0.0);
        let tr = encode_bits(&tx, &[0]).unwrap();
        assert_eq!(tr.flow_at(30.0), LevelFlow { info: 0.0, solvent: 40.0 });
        let q = TransmitterConfig::qcsk("b", 0, 1.0, 60.0, 0.0);
        let tr = encode_bits(&q, &[1, 1]).unwrap();
        assert_eq!(tr.flow_at(0.0), LevelFlow { info: 60.0, solvent: 0.0 });
        let empty = encode_bits(&tx, &[]).unwrap();
        assert_eq!(empty.horizon_s(), 0.0);
        assert!(empty.segments.is_empty());
    }

    #[test]
    fn duty_cycle_and_offset() {
        let mut tx = TransmitterConfig::bcsk("a", 0, 1.0, 40.0, 100.0, 30.0);
        tx.duty_cycle = 0.25;
        let tr = encode_bits(&tx, &[1, 1]).unwrap();
        assert_eq!(tr.flow_at(10.0).info, 0.0);
        assert_eq!(tr.flow_at(30.0).info, 40.0);
        assert_eq!(tr.flow_at(54.9).info, 40.0);
        assert_eq!(tr.flow_at(55.0).info, 0.0);
        assert_eq!(tr.flow_at(130.0).info, 40.0);
        assert_eq!(tr.horizon_s(), 230.0);
        assert_eq!(tr.flow_at(500.0), LevelFlow { info: 0.0, solvent: 40.0 });
    }

    #[test]
    fn invalid_transmitters() {
        let mut tx = TransmitterConfig::qcsk("a", 0, 1.0, 60.0, 0.0);
        tx.level_flows[2].solvent = 25.0;
        assert!(tx.validate().is_err());
        let mut tx = TransmitterConfig::bcsk("a", 0, 1.0, 40.0, 60.0, 0.0);
        tx.duty_cycle = 0.0;
        assert!(tx.validate().is_err());
        tx.duty_cycle = 1.0;
        tx.bit_interval_s = 0.0;
        assert!(tx.validate().is_err());
    }

    #[test]
    fn dilution_examples() {
        assert!((dilute(2.18e-5, 40.0, 80.0).unwrap() - 1.09e-5).abs() < 1e-18);
        assert!((dilute(7.2e-5, 40.0, 120.0).unwrap() - 2.4e-5).abs() < 1e-18);
        assert_eq!(dilute(7.2e-5, 0.0, 120.0).unwrap(), 0.0);
        assert!(matches!(dilute(1.0, 0.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn ber_examples() {
        let t = parse_bits("10010001101001").unwrap();
        assert_eq!(ber(&t, &t).unwrap(), 0.0);
        let flipped: Vec<u8> = t.iter().map(|b| 1 - b).collect();
        assert_eq!(ber(&flipped, &t).unwrap(), 1.0);
        let mut four = t.clone();
        for i in [0, 3, 7, 11] {
            four[i] ^= 1;
        }
        assert!((ber(&four, &t).unwrap() - 4.0 / 14.0).abs() < 1e-15);
        assert!(ber(&t[..3], &t).is_err());
    }

    #[test]
    fn ties_go_low() {
        assert_eq!(decide_level(0.5, &[0.0, 1.0]), 0);
        assert_eq!(decide_level(0.50001, &[0.0, 1.0]), 1);
        assert_eq!(decide_level(2.6, &[0.0, 1.0, 2.0, 3.0]), 3);
    }

    #[test]
    fn lag_reaches_63_percent_after_tau() {
        let series =
            ConcentrationSeries { starts: vec![0.0, 100.0], values: vec![vec![0.0], vec![1.0]], horizon_s: 400.0 };
        let y = lagged_concentrations(&series, &[50.0, 100.0, 130.0, 399.0], 30.0);
        assert_eq!(y[0][0], 0.0);
        assert_eq!(y[1][0], 0.0);
        assert!((y[2][0] - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        let z = lagged_concentrations(&series, &[50.0, 100.0, 130.0], 0.0);
        assert_eq!(z[2][0], 1.0);
    }

    fn eps() -> ExtinctionProfileSet<f64> {
        let grid = Arc::new(WavelengthGrid::uniform(400.0, 850.0, 96).unwrap());
        synthetic_profile_set(grid, &dye_stand_in_bands()).unwrap()
    }

    #[test]
    fn noiseless_observation_is_beer_lambert() {
        let e = eps();
        let s = LinkScenario::bcsk_sync();
        let txs = s.configs();
        let traces: Vec<_> = s
            .transmitters
            .iter()
            .map(|t| encode_bits(&t.config, &message_bits(Scheme::Bcsk, &t.message).unwrap()).unwrap())
            .collect();
        let series = mix_at_junction(&txs, &traces, 2).unwrap();
        let link = LinkConfig { noise: None, ..LinkConfig::default() };
        let obs = channel_observe(&series, &link, &e, &mut RandomSource::new(0)).unwrap();
        assert_eq!(obs.times_s.len(), 42);
        for (c, spec) in obs.true_concentrations.iter().zip(&obs.spectra) {
            let want = absorbance_mix(&e, &ConcentrationVector(c.clone()), PathLength::default()).unwrap();
            assert_eq!(spec, &want);
        }
        // first bit of "H" and "i" is 1 for both
        assert!((obs.true_concentrations[0][0] - 1.09e-5).abs() < 1e-18);
        assert!((obs.true_concentrations[0][1] - 5.75e-5).abs() < 1e-17);
    }

    #[test]
    fn all_zero_series_decodes_zeros() {
        let tx = TransmitterConfig::bcsk("a", 0, 1e-5, 40.0, 60.0, 0.0);
        let times = sample_times(420.0, 10.0);
        let est = vec![vec![0.0, 0.0]; times.len()];
        let txs = std::slice::from_ref(&tx);
        let d = demodulate_estimates(&times, 420.0, &est, txs, &[7], &reference_levels(txs).unwrap()).unwrap();
        assert_eq!(d.streams[0].bits, vec![0; 7]);
        assert!(demodulate_estimates(&times, 420.0, &est, txs, &[8], &reference_levels(txs).unwrap()).is_err());
    }

    fn oracle_run(s: &LinkScenario) -> LinkRun<f64> {
        let e = eps();
        let oracle = LeastSquaresUnmixer::new(e.clone(), PathLength::default()).unwrap();
        let mut s = s.clone();
        s.link.noise = None;
        run_link(&oracle, &s, &e, &mut RandomSource::new(1)).unwrap()
    }

    #[test]
    fn presets_round_trip_with_oracle() {
        for s in [LinkScenario::bcsk_sync(), LinkScenario::bcsk_desync(), LinkScenario::qcsk_sync()] {
            let run = oracle_run(&s);
            assert_eq!(run.summary.ber, 0.0, "{:?}", run.summary);
            assert_eq!(run.summary.decoded_message, s.message());
        }
        let q = oracle_run(&LinkScenario::qcsk_sync());
        assert_eq!(q.summary.symbols, 14);
        assert_eq!(q.summary.bits, 28);
        assert_eq!(q.summary.decoded_message, "KCL!");
    }

    #[test]
    fn link_csv_outputs() {
        let run = oracle_run(&LinkScenario::bcsk_sync());
        let mut buf = Vec::new();
        run.write_trace_csv(&["IC".into(), "NR".into()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("time_s,true_IC,true_NR,pred_IC,pred_NR\n"));
        assert_eq!(text.lines().count(), 43);
        let mut buf = Vec::new();
        run.write_decisions_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 15);
        assert!(text.lines().nth(1).unwrap().starts_with("TX1,0,0,60,6,"));
    }

    fn bits_strategy(max_chars: usize) -> impl Strategy<Value = Vec<u8>> {
        (1..=max_chars).prop_flat_map(|n| proptest::collection::vec(0u8..=1, 2 * n))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn flow_is_conserved(bits in bits_strategy(8), duty in 0.1f64..=1.0, offset in 0.0f64..50.0) {
            for mut tx in [TransmitterConfig::bcsk("a", 0, 1.0, 25.0, 40.0, offset), TransmitterConfig::qcsk("b", 0, 1.0, 40.0, offset)] {
                tx.duty_cycle = duty;
                let tr = encode_bits(&tx, &bits).unwrap();
                for s in &tr.segments {
                    prop_assert!((s.flow.total() - tx.total_flow()).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn dilution_inverts(stock in 1e-7f64..1e-3, info in 0.1f64..100.0, other in 0.0f64..100.0) {
            let q = info + other;
            let c = dilute(stock, info, q).unwrap();
            let back = c * q / info;
            prop_assert!((back - stock).abs() <= 1e-12 * stock);
        }

        #[test]
        fn genie_round_trip(a in bits_strategy(4), b in bits_strategy(4), desync in any::<bool>(), qcsk in any::<bool>()) {
            let (t1, t2, o1, o2) = if desync { (100.0, 60.0, 20.0, 50.0) } else { (60.0, 60.0, 0.0, 0.0) };
            let txs = if qcsk {
                vec![TransmitterConfig::qcsk("1", 0, QCSK_STOCKS[0], t1, o1), TransmitterConfig::qcsk("2", 1, QCSK_STOCKS[1], t2, o2)]
            } else {
                vec![TransmitterConfig::bcsk("1", 0, BCSK_STOCKS[0], 25.0, t1, o1), TransmitterConfig::bcsk("2", 1, BCSK_STOCKS[1], 40.0, t2, o2)]
            };
            let e = eps();
            let oracle = LeastSquaresUnmixer::new(e.clone(), PathLength::default()).unwrap();
            let sent = [a, b];
            let traces: Vec<_> = txs.iter().zip(&sent).map(|(tx, bits)| encode_bits(tx, bits).unwrap()).collect();
            let series = mix_at_junction(&txs, &traces, 2).unwrap();
            let link = LinkConfig { noise: None, ..LinkConfig::default() };
            let obs = channel_observe(&series, &link, &e, &mut RandomSource::new(0)).unwrap();
            let frames: Vec<usize> = txs.iter().zip(&sent).map(|(tx, s)| s.len() / tx.scheme.bits_per_symbol()).collect();
            let d = demodulate(&oracle, &obs, &txs, &frames, &reference_levels(&txs).unwrap()).unwrap();
            prop_assert_eq!(&d.streams[0].bits, &sent[0]);
            prop_assert_eq!(&d.streams[1].bits, &sent[1]);
        }
    }
}
