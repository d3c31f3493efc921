//! Per-channel 1-D DFT/iDFT, the symmetric frequency basis, and
//! frequency-sensitivity heatmaps.
//!
//! Convention: the forward transform carries the 1/T factor and the inverse
//! is unnormalized, so `idft(dft(x)) == x` and the basis construction
//! (inverse transform of a two-spike indicator) is well defined.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::rng::fingerprint_f64;

/// Complex spectrum of one real channel; `coeffs.len()` is the signal length.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub coeffs: Vec<Complex64>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.coeffs.iter().map(|c| c.norm()).collect()
    }

    /// Largest deviation from Hermitian symmetry coeff[t] = conj(coeff[-t]).
    pub fn hermitian_residual(&self) -> f64 {
        let t = self.coeffs.len();
        let mut worst = 0.0f64;
        for k in 0..t {
            let mirror = self.coeffs[(t - k) % t].conj();
            worst = worst.max((self.coeffs[k] - mirror).norm());
        }
        worst
    }
}

fn roots_of_unity(t: usize) -> Vec<Complex64> {
    // roots[j] = e^{-i 2 pi j / T}
    (0..t)
        .map(|j| {
            let angle = -2.0 * std::f64::consts::PI * j as f64 / t as f64;
            Complex64::new(angle.cos(), angle.sin())
        })
        .collect()
}

/// Forward DFT of one real channel: F[k] = (1/T) sum_t x[t] e^{-i 2 pi t k / T}.
pub fn dft(x: &[f64]) -> Result<Spectrum> {
    let t = x.len();
    if t == 0 {
        return Err(Error::contract("dft: empty input"));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "dft" });
    }
    let roots = roots_of_unity(t);
    let scale = 1.0 / t as f64;
    let coeffs = (0..t)
        .map(|k| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (step, &v) in x.iter().enumerate() {
                acc += roots[(step * k) % t] * v;
            }
            acc * scale
        })
        .collect();
    Ok(Spectrum { coeffs })
}

/// Inverse DFT back to a real sequence: x[t] = sum_k F[k] e^{+i 2 pi t k / T}.
///
/// The spectrum must be Hermitian within 1e-9; a small imaginary residue is
/// discarded with a warning, a larger one is an error.
pub fn idft(spec: &Spectrum) -> Result<Vec<f64>> {
    let t = spec.coeffs.len();
    if t == 0 {
        return Err(Error::contract("idft: empty spectrum"));
    }
    let roots = roots_of_unity(t);
    let mut out = Vec::with_capacity(t);
    let mut residual = 0.0f64;
    for step in 0..t {
        let mut acc = Complex64::new(0.0, 0.0);
        for (k, c) in spec.coeffs.iter().enumerate() {
            // e^{+i..} is the conjugate root.
            acc += roots[(step * k) % t].conj() * c;
        }
        residual = residual.max(acc.im.abs());
        out.push(acc.re);
    }
    if residual > 1e-9 {
        return Err(Error::Symmetry { residual });
    }
    if residual > 1e-12 {
        log::warn!("idft: discarding imaginary residue {residual:e}");
    }
    Ok(out)
}

/// The temporal perturbation basis: T unit-norm vectors, each supported on
/// one frequency band and its mirror.
#[derive(Debug, Clone)]
pub struct FrequencyBasis {
    vectors: Vec<Vec<f64>>,
    len: usize,
}

/// Build the basis for signals of length `t`: vector `k` is the inverse
/// transform of an indicator spiking bands k and (T-k) mod T, then scaled
/// to unit L2 norm.
pub fn build_basis(t: usize) -> Result<FrequencyBasis> {
    if t < 2 {
        return Err(Error::contract("build_basis: need T >= 2"));
    }
    let mut vectors = Vec::with_capacity(t);
    for k in 0..t {
        let mut spikes = vec![Complex64::new(0.0, 0.0); t];
        spikes[k] = Complex64::new(1.0, 0.0);
        spikes[(t - k) % t] = Complex64::new(1.0, 0.0);
        let mut v = idft(&Spectrum { coeffs: spikes })?;
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= norm;
        }
        vectors.push(v);
    }
    Ok(FrequencyBasis { vectors, len: t })
}

impl FrequencyBasis {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn vector(&self, band: usize) -> &[f64] {
        &self.vectors[band]
    }

    /// Row-major (T x T) matrix whose row t is basis vector U_t; trigger
    /// synthesis is then a plain matmul with coefficient rows.
    pub fn matrix(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len * self.len);
        for v in &self.vectors {
            out.extend_from_slice(v);
        }
        out
    }
}

/// Per-band, per-channel sensitivity of one model on one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrequencyHeatmap {
    pub bands: usize,
    pub channels: usize,
    /// Row-major (band, channel) sensitivity scores.
    pub values: Vec<f64>,
    pub lambda: f64,
    pub model_fingerprint: String,
    pub data_fingerprint: String,
}

impl FrequencyHeatmap {
    pub fn get(&self, band: usize, channel: usize) -> f64 {
        self.values[band * self.channels + channel]
    }
}

/// Clamp negatives to zero and scale each channel so its peak is 1.
/// All-zero channels stay zero. The result is the trigger target S-tilde.
pub fn normalize_heatmap(heatmap: &FrequencyHeatmap) -> Vec<f64> {
    let (t, m) = (heatmap.bands, heatmap.channels);
    let mut out: Vec<f64> = heatmap.values.iter().map(|v| v.max(0.0)).collect();
    for ch in 0..m {
        let mut peak = 0.0f64;
        for band in 0..t {
            peak = peak.max(out[band * m + ch]);
        }
        if peak > 0.0 {
            for band in 0..t {
                out[band * m + ch] /= peak;
            }
        }
    }
    out
}

/// Anything that can score a batch of inputs with per-sample losses.
/// The heatmap estimator only needs this narrow view of a classifier.
pub trait SensitivityModel: Sync {
    fn input_len(&self) -> usize;
    fn input_channels(&self) -> usize;
    fn model_fingerprint(&self) -> String;
    /// Per-sample cross-entropy losses for `n` samples laid out (n, T, M).
    fn batch_losses(&self, batch: &[f64], n: usize, labels: &[usize]) -> Result<Vec<f64>>;
}

const LOSS_CHUNK: usize = 64;

fn chunked_losses(model: &dyn SensitivityModel, ds: &TimeSeriesDataset) -> Result<Vec<f64>> {
    let sample_len = ds.seq_len * ds.channels;
    let mut losses = Vec::with_capacity(ds.len());
    for chunk_start in (0..ds.len()).step_by(LOSS_CHUNK) {
        let n = LOSS_CHUNK.min(ds.len() - chunk_start);
        let data = &ds.data[chunk_start * sample_len..(chunk_start + n) * sample_len];
        let labels = &ds.labels[chunk_start..chunk_start + n];
        losses.extend(model.batch_losses(data, n, labels)?);
    }
    Ok(losses)
}

/// Estimate the frequency heatmap of `model` on `ds`.
///
/// S[t, m] is the mean loss increase over the dataset when basis vector
/// U_t, scaled by `lambda`, is added to channel m. One model evaluation
/// per (sample, band, channel), so the cost is O(|D| * T * M) passes.
pub fn estimate_heatmap(
    model: &dyn SensitivityModel,
    ds: &TimeSeriesDataset,
    lambda: f64,
) -> Result<FrequencyHeatmap> {
    if ds.len() == 0 {
        return Err(Error::contract("estimate_heatmap: empty dataset"));
    }
    if lambda <= 0.0 {
        return Err(Error::contract("estimate_heatmap: lambda must be positive"));
    }
    if model.input_len() != ds.seq_len || model.input_channels() != ds.channels {
        return Err(Error::ShapeMismatch {
            op: "estimate_heatmap",
            left: vec![model.input_len(), model.input_channels()],
            right: vec![ds.seq_len, ds.channels],
        });
    }
    let (t, m) = (ds.seq_len, ds.channels);
    let basis = build_basis(t)?;
    let base = chunked_losses(model, ds)?;
    let sample_len = t * m;

    // Bands are independent; parallelize over them and reduce each band in
    // fixed sample order so the result does not depend on thread count.
    let rows: Vec<Vec<f64>> = (0..t)
        .into_par_iter()
        .map(|band| -> Result<Vec<f64>> {
            let u = basis.vector(band);
            let mut row = vec![0.0; m];
            let mut perturbed = vec![0.0; LOSS_CHUNK * sample_len];
            for (ch, row_v) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for chunk_start in (0..ds.len()).step_by(LOSS_CHUNK) {
                    let n = LOSS_CHUNK.min(ds.len() - chunk_start);
                    let src = &ds.data[chunk_start * sample_len..(chunk_start + n) * sample_len];
                    let dst = &mut perturbed[..n * sample_len];
                    dst.copy_from_slice(src);
                    for b in 0..n {
                        for (step, &uv) in u.iter().enumerate() {
                            dst[(b * t + step) * m + ch] += lambda * uv;
                        }
                    }
                    let labels = &ds.labels[chunk_start..chunk_start + n];
                    let losses = model.batch_losses(dst, n, labels)?;
                    for (i, l) in losses.iter().enumerate() {
                        acc += l - base[chunk_start + i];
                    }
                }
                *row_v = acc / ds.len() as f64;
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut values = Vec::with_capacity(t * m);
    for row in rows {
        values.extend(row);
    }
    Ok(FrequencyHeatmap {
        bands: t,
        channels: m,
        values,
        lambda,
        model_fingerprint: model.model_fingerprint(),
        data_fingerprint: fingerprint_f64(&ds.data),
    })
}

/// Mean magnitude spectrum over a batch of temporal signals laid out
/// (n, T, M); returns a row-major (T, M) matrix.
pub fn mean_spectral_magnitude(data: &[f64], n: usize, t: usize, m: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::contract("mean_spectral_magnitude: empty batch"));
    }
    let mut out = vec![0.0; t * m];
    let mut channel = vec![0.0; t];
    for b in 0..n {
        for ch in 0..m {
            for step in 0..t {
                channel[step] = data[(b * t + step) * m + ch];
            }
            let spec = dft(&channel)?;
            for (band, c) in spec.coeffs.iter().enumerate() {
                out[band * m + ch] += c.norm();
            }
        }
    }
    for v in out.iter_mut() {
        *v /= n as f64;
    }
    Ok(out)
}

/// Cosine similarity between two equal-length matrices viewed as vectors.
/// Returns 0 when either side has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Serialize a (T, M) matrix as `band,channel,value` CSV text.
pub fn matrix_to_csv(values: &[f64], t: usize, m: usize) -> String {
    let mut out = String::from("band,channel,value\n");
    for band in 0..t {
        for ch in 0..m {
            out.push_str(&format!("{band},{ch},{}\n", values[band * m + ch]));
        }
    }
    out
}

/// Parse matrix CSV written by [`matrix_to_csv`].
pub fn matrix_from_csv(text: &str) -> Result<(Vec<f64>, usize, usize)> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "band,channel,value")) => {}
        _ => return Err(Error::Schema("missing band,channel,value header".into())),
    }
    let mut entries = Vec::new();
    let (mut max_band, mut max_ch) = (0usize, 0usize);
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        fn parse(s: Option<&str>, line: usize) -> Result<&str> {
            s.ok_or(Error::Parse {
                line,
                message: "expected band,channel,value".into(),
            })
        }
        let band: usize = parse(parts.next(), i + 1)?.parse().map_err(|e| Error::Parse {
            line: i + 1,
            message: format!("bad band: {e}"),
        })?;
        let ch: usize = parse(parts.next(), i + 1)?.parse().map_err(|e| Error::Parse {
            line: i + 1,
            message: format!("bad channel: {e}"),
        })?;
        let value: f64 = parse(parts.next(), i + 1)?.parse().map_err(|e| Error::Parse {
            line: i + 1,
            message: format!("bad value: {e}"),
        })?;
        max_band = max_band.max(band);
        max_ch = max_ch.max(ch);
        entries.push((band, ch, value));
    }
    if entries.is_empty() {
        return Err(Error::Schema("empty matrix csv".into()));
    }
    let (t, m) = (max_band + 1, max_ch + 1);
    if entries.len() != t * m {
        return Err(Error::Schema(format!(
            "expected {} rows for a {t}x{m} matrix, found {}",
            t * m,
            entries.len()
        )));
    }
    let mut values = vec![0.0; t * m];
    for (band, ch, v) in entries {
        values[band * m + ch] = v;
    }
    Ok((values, t, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn constant_signal_is_dc_only() {
        let spec = dft(&[2.5; 16]).unwrap();
        assert!((spec.coeffs[0].re - 2.5).abs() < 1e-12);
        for c in &spec.coeffs[1..] {
            assert!(c.norm() < 1e-12);
        }
    }

    #[test]
    fn cosine_hits_two_symmetric_bands() {
        let t = 16;
        let x: Vec<f64> = (0..t)
            .map(|n| (2.0 * std::f64::consts::PI * 3.0 * n as f64 / t as f64).cos())
            .collect();
        let spec = dft(&x).unwrap();

        // Direct-summation oracle for the two expected bands.
        let oracle = |k: usize| -> Complex64 {
            let mut acc = Complex64::new(0.0, 0.0);
            for (n, &v) in x.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (n * k) as f64 / t as f64;
                acc += Complex64::new(ang.cos(), ang.sin()) * v;
            }
            acc / t as f64
        };
        for (k, c) in spec.coeffs.iter().enumerate() {
            if k == 3 || k == 13 {
                assert!((c.norm() - 0.5).abs() < 1e-12);
                assert!((c - oracle(k)).norm() < 1e-12);
            } else {
                assert!(c.norm() < 1e-12, "band {k} has mass {}", c.norm());
            }
        }
    }

    #[test]
    fn zero_spectrum_gives_zero_signal() {
        let spec = Spectrum {
            coeffs: vec![Complex64::new(0.0, 0.0); 8],
        };
        assert_eq!(idft(&spec).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn dc_spike_gives_constant_signal() {
        let mut coeffs = vec![Complex64::new(0.0, 0.0); 8];
        coeffs[0] = Complex64::new(1.0, 0.0);
        let x = idft(&Spectrum { coeffs }).unwrap();
        assert_close(&x, &[1.0; 8], 1e-12);
    }

    #[test]
    fn non_hermitian_spectrum_rejected() {
        let mut coeffs = vec![Complex64::new(0.0, 0.0); 8];
        coeffs[1] = Complex64::new(0.0, 1.0); // mirror at 7 missing
        let err = idft(&Spectrum { coeffs }).unwrap_err();
        assert!(matches!(err, Error::Symmetry { .. }));
    }

    #[test]
    fn random_hermitian_spectrum_matches_direct_inverse() {
        use rand::Rng;
        let mut rng = crate::rng::stream(3, "spectral-test");
        let t = 12;
        let mut coeffs = vec![Complex64::new(0.0, 0.0); t];
        coeffs[0] = Complex64::new(rng.gen::<f64>(), 0.0);
        coeffs[6] = Complex64::new(rng.gen::<f64>(), 0.0);
        for k in 1..6 {
            let c = Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
            coeffs[k] = c;
            coeffs[t - k] = c.conj();
        }
        let spec = Spectrum { coeffs };
        let x = idft(&spec).unwrap();
        // Direct-summation oracle keeping the real part.
        for (step, &xv) in x.iter().enumerate() {
            let mut acc = 0.0;
            for (k, c) in spec.coeffs.iter().enumerate() {
                let ang = 2.0 * std::f64::consts::PI * (step * k) as f64 / t as f64;
                acc += c.re * ang.cos() - c.im * ang.sin();
            }
            assert!((xv - acc).abs() < 1e-9);
        }
    }

    #[test]
    fn basis_vectors_are_cosines_with_expected_support() {
        let t = 8;
        let basis = build_basis(t).unwrap();
        // U_0 is the constant vector with unit norm.
        assert_close(basis.vector(0), &[1.0 / (8f64).sqrt(); 8], 1e-12);
        // U_2 is proportional to cos(2 pi 2 n / 8) and supported on {2, 6}.
        let u2 = basis.vector(2);
        let scale = u2[0];
        for (n, &v) in u2.iter().enumerate() {
            let expect = scale * (2.0 * std::f64::consts::PI * 2.0 * n as f64 / 8.0).cos();
            assert!((v - expect).abs() < 1e-9);
        }
        let spec = dft(u2).unwrap();
        for (k, c) in spec.coeffs.iter().enumerate() {
            if k == 2 || k == 6 {
                assert!(c.norm() > 1e-3);
            } else {
                assert!(c.norm() < 1e-9);
            }
        }
        // Unit norms across the board.
        for k in 0..t {
            let norm: f64 = basis.vector(k).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn basis_orthogonal_for_disjoint_support() {
        let t = 30;
        let basis = build_basis(t).unwrap();
        for s in 0..t {
            for k in 0..t {
                let shared = s == k || s == (t - k) % t;
                if shared {
                    continue;
                }
                let dot: f64 = basis
                    .vector(s)
                    .iter()
                    .zip(basis.vector(k))
                    .map(|(a, b)| a * b)
                    .sum();
                assert!(dot.abs() <= 1e-9, "<U_{s}, U_{k}> = {dot}");
            }
        }
    }

    #[test]
    fn parseval_under_chosen_normalization() {
        // With forward 1/T: sum_t x^2 = T * sum_k |F[k]|^2.
        use rand::Rng;
        let mut rng = crate::rng::stream(11, "parseval");
        let t = 30;
        let x: Vec<f64> = (0..t).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let spec = dft(&x).unwrap();
        let temporal: f64 = x.iter().map(|v| v * v).sum();
        let spectral: f64 = spec.coeffs.iter().map(|c| c.norm_sqr()).sum();
        assert!((temporal - t as f64 * spectral).abs() < 1e-9);
    }

    #[test]
    fn normalize_clamps_and_scales_per_channel() {
        let heat = FrequencyHeatmap {
            bands: 3,
            channels: 1,
            values: vec![0.0, 2.0, 4.0],
            lambda: 0.3,
            model_fingerprint: String::new(),
            data_fingerprint: String::new(),
        };
        assert_eq!(normalize_heatmap(&heat), vec![0.0, 0.5, 1.0]);

        let heat = FrequencyHeatmap {
            bands: 2,
            channels: 2,
            values: vec![-1.0, 0.0, 3.0, 0.0],
            lambda: 0.3,
            model_fingerprint: String::new(),
            data_fingerprint: String::new(),
        };
        // Channel 0: [-1, 3] -> [0, 1]; channel 1 all zero stays zero.
        assert_eq!(normalize_heatmap(&heat), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn matrix_csv_round_trip() {
        let values = vec![0.5, -1.25, 3.0, 0.0, 1e-12, 42.0];
        let text = matrix_to_csv(&values, 3, 2);
        assert!(text.starts_with("band,channel,value\n"));
        let (back, t, m) = matrix_from_csv(&text).unwrap();
        assert_eq!((t, m), (3, 2));
        assert_eq!(back, values);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_identity(values in proptest::collection::vec(-10.0..10.0f64, 2..40)) {
            let spec = dft(&values).unwrap();
            let back = idft(&spec).unwrap();
            for (a, b) in values.iter().zip(&back) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn normalize_preserves_argmax(values in proptest::collection::vec(-5.0..5.0f64, 8)) {
            let heat = FrequencyHeatmap {
                bands: 8,
                channels: 1,
                values: values.clone(),
                lambda: 0.3,
                model_fingerprint: String::new(),
                data_fingerprint: String::new(),
            };
            let norm = normalize_heatmap(&heat);
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max > 0.0 {
                let argmax_before = values.iter().position(|&v| v == max).unwrap();
                let norm_max = norm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let argmax_after = norm.iter().position(|&v| v == norm_max).unwrap();
                prop_assert_eq!(argmax_before, argmax_after);
            }
        }
    }
}
