use gatenet::cyto::LabeledSample;
use gatenet::synth::{
    benchmark_preset, generate_dataset, generate_sample, BatchEffectSpec, Preset, SynthDatasetSpec,
};

fn class_means(s: &LabeledSample, c: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let m = s.events.n_markers();
    let mut sum = vec![vec![0.0; m]; c];
    let mut n = vec![0usize; c];
    for (i, &l) in s.labels().iter().enumerate() {
        n[l] += 1;
        for (acc, v) in sum[l].iter_mut().zip(s.events.event(i)) {
            *acc += v;
        }
    }
    for (row, &k) in sum.iter_mut().zip(&n) {
        row.iter_mut().for_each(|v| *v /= k.max(1) as f64);
    }
    (sum, n)
}

fn centroids(samples: &[LabeledSample], c: usize) -> Vec<Vec<f64>> {
    let m = samples[0].events.n_markers();
    let mut sum = vec![vec![0.0; m]; c];
    let mut n = vec![0usize; c];
    for s in samples {
        for (i, &l) in s.labels().iter().enumerate() {
            n[l] += 1;
            for (acc, v) in sum[l].iter_mut().zip(s.events.event(i)) {
                *acc += v;
            }
        }
    }
    for (row, &k) in sum.iter_mut().zip(&n) {
        row.iter_mut().for_each(|v| *v /= k as f64);
    }
    sum
}

fn nearest(x: &[f64], cs: &[Vec<f64>]) -> usize {
    let d = |c: &Vec<f64>| c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    (0..cs.len()).min_by(|&a, &b| d(&cs[a]).total_cmp(&d(&cs[b]))).unwrap()
}

fn accuracy(samples: &[LabeledSample], cs: impl Fn(&LabeledSample) -> Vec<Vec<f64>>) -> f64 {
    let (mut ok, mut n) = (0usize, 0usize);
    for s in samples {
        let c = cs(s);
        for (i, &l) in s.labels().iter().enumerate() {
            ok += usize::from(nearest(s.events.event(i), &c) == l);
        }
        n += s.n_events();
    }
    ok as f64 / n as f64
}

#[test]
fn without_batch_effect_class_means_match_the_spec() {
    let mut spec = benchmark_preset(Preset::Separable);
    spec.batch_effect = BatchEffectSpec::none();
    let (s, _) = generate_sample(&spec, 0).unwrap();
    let (means, n) = class_means(&s, spec.populations.len());
    for (c, pop) in spec.populations.iter().enumerate() {
        let se = (1.0 / n[c] as f64).sqrt();
        for (got, want) in means[c].iter().zip(&pop.mean) {
            assert!((got - want).abs() < 3.0 * se, "class {c}: {got} vs {want}");
        }
    }
}

#[test]
fn batch_effect_is_affine_within_a_sample() {
    let mut spec = benchmark_preset(Preset::BatchHard);
    spec.events_per_sample.median = 20_000.0;
    let ds = generate_dataset(&spec).unwrap();
    for (s, truth) in ds.samples.iter().zip(ds.diagnostics()).take(3) {
        let c = spec.populations.len();
        let m = spec.n_markers();
        let mut sum = vec![vec![0.0; m]; c];
        let mut sq = vec![vec![0.0; m]; c];
        let mut n = vec![0usize; c];
        for (i, &l) in s.labels().iter().enumerate() {
            n[l] += 1;
            for j in 0..m {
                // undo the sample's affine map
                let z = (s.events.event(i)[j] - truth.shift[j]) / truth.gain[j];
                let z = z - spec.populations[l].mean[j] - truth.population_drift[l][j];
                sum[l][j] += z;
                sq[l][j] += z * z;
            }
        }
        for k in 0..c {
            let nk = n[k] as f64;
            for j in 0..m {
                let mean = sum[k][j] / nk;
                let var = sq[k][j] / nk - mean * mean;
                assert!(mean.abs() < 4.0 / nk.sqrt(), "mean {mean}");
                // variance of a sample variance of unit normals is 2/n
                assert!((var - 1.0).abs() < 4.0 * (2.0 / nk).sqrt(), "var {var}");
            }
        }
    }
}

#[test]
fn generation_is_reproducible_per_sample() {
    let spec = benchmark_preset(Preset::BatchHard);
    let a = generate_dataset(&spec).unwrap();
    let b = generate_dataset(&spec).unwrap();
    assert_eq!(a.samples, b.samples);
    // sample i does not depend on how many samples are generated
    let mut fewer = spec.clone();
    fewer.n_samples = 3;
    let c = generate_dataset(&fewer).unwrap();
    assert_eq!(c.samples[..], a.samples[..3]);
    let (s2, _) = generate_sample(&spec, 2).unwrap();
    assert_eq!(s2, a.samples[2]);
    assert_ne!(a.samples[0].events, a.samples[1].events);
}

#[test]
fn event_counts_follow_the_lognormal_spec() {
    let mut spec = benchmark_preset(Preset::Separable);
    spec.n_samples = 200;
    spec.events_per_sample.median = 50.0;
    spec.events_per_sample.dispersion = 0.5;
    let ds = generate_dataset(&spec).unwrap();
    let logs: Vec<f64> = ds.samples.iter().map(|s| (s.n_events() as f64).ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    let sd = (logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (logs.len() - 1) as f64).sqrt();
    assert!((mean - 50f64.ln()).abs() < 0.12, "mean log size {mean}");
    assert!((sd - 0.5).abs() < 0.1, "sd of log size {sd}");
}

#[test]
fn batch_hard_gap_is_built_in() {
    let spec = benchmark_preset(Preset::BatchHard);
    let ds = generate_dataset(&spec).unwrap();
    let c = spec.populations.len();
    let half = ds.samples.len() / 2;
    let pooled = centroids(&ds.samples[..half], c);
    let cross = accuracy(&ds.samples[half..], |_| pooled.clone());
    let oracle = accuracy(&ds.samples, |s| centroids(std::slice::from_ref(s), c));
    assert!(cross <= 0.8, "context-free nearest centroid {cross}");
    assert!(oracle >= 0.99, "per-sample oracle {oracle}");
    assert!(oracle - cross >= 0.19);
}

#[test]
fn rare_class_frequency() {
    let spec = benchmark_preset(Preset::RareClass);
    let rare = spec.populations.iter().position(|p| p.frequency == 0.001).unwrap();
    let mut big = spec.clone();
    big.n_samples = 4;
    big.events_per_sample.median = 100_000.0;
    let ds = generate_dataset(&big).unwrap();
    let (k, n) = ds
        .samples
        .iter()
        .fold((0, 0), |(k, n), s| (k + s.class_counts()[rare], n + s.n_events()));
    let p = k as f64 / n as f64;
    let se = (0.001 * 0.999 / n as f64).sqrt();
    assert!((p - 0.001).abs() < 4.0 * se, "rare share {p}");
}

#[test]
fn separable_preset_has_no_batch_effect() {
    let spec = benchmark_preset(Preset::Separable);
    let ds = generate_dataset(&spec).unwrap();
    for t in ds.diagnostics() {
        assert!(t.shift.iter().all(|&v| v == 0.0));
        assert!(t.gain.iter().all(|&v| v == 1.0));
    }
    let pooled = centroids(&ds.samples, spec.populations.len());
    assert!(accuracy(&ds.samples, |_| pooled.clone()) > 0.999);
}

#[test]
fn spec_validation() {
    let good = benchmark_preset(Preset::Separable);
    let mut bad = good.clone();
    bad.populations[0].frequency = 0.9;
    assert!(bad.validate().is_err());
    let mut bad = good.clone();
    bad.batch_effect.gain_range = (1.2, 1.1);
    assert!(bad.validate().is_err());
    let mut bad = good.clone();
    bad.populations[1].mean.pop();
    assert!(bad.validate().is_err());
    let mut bad: SynthDatasetSpec = good;
    bad.marker_names[1] = bad.marker_names[0].clone();
    assert!(bad.validate().is_err());
}
