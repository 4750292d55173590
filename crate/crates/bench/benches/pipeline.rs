use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hallucidet_bench::{ap_problem, detector, samples};
use hallucidet_core::classic::ClassicMethod;
use hallucidet_core::detector::{image_tensor, DecodeConfig, Detector, RegressionKind};
use hallucidet_core::hallucinet::{ir_tensor, HalluciNetConfig};
use hallucidet_core::metrics::average_precision_at_50;
use hallucidet_core::train::{detector_sample_grad, hallucination_sample_grad};
use hallucidet_core::{LossWeights, ParamStore};
use std::hint::black_box;

fn detector_step(c: &mut Criterion) {
    let s = samples(1).samples.remove(0);
    let x = image_tensor::<f32>(&s.rgb);
    let w = LossWeights::default();
    let mut g = c.benchmark_group("detector_fwd_bwd");
    for width in [4, 8, 16] {
        let cfg = detector(width);
        let p: ParamStore<f32> = cfg.init(0);
        g.bench_with_input(BenchmarkId::from_parameter(width), &width, |b, _| {
            b.iter(|| detector_sample_grad(&cfg, &p, &x, &s.boxes, &w, RegressionKind::L1).unwrap())
        });
    }
    g.finish();
}

fn hallucination_step(c: &mut Criterion) {
    let s = samples(1).samples.remove(0);
    let x = ir_tensor::<f32>(&s.ir).unwrap();
    let dc = detector(8);
    let dp: ParamStore<f32> = dc.init(0);
    let w = LossWeights::default();
    let mut g = c.benchmark_group("hallucination_fwd_bwd");
    g.sample_size(20);
    for preset in ["tiny", "small"] {
        let nc = HalluciNetConfig::preset(preset).unwrap();
        let np: ParamStore<f32> = nc.init(0);
        g.bench_function(preset, |b| {
            b.iter(|| hallucination_sample_grad(&nc, &np, &dc, &dp, &x, &s.boxes, &w, RegressionKind::L1).unwrap())
        });
    }
    g.finish();
}

fn inference(c: &mut Criterion) {
    let s = samples(1).samples.remove(0);
    let det = Detector::new(detector(8), 0).unwrap();
    let decode = DecodeConfig::default();
    c.bench_function("detect_w8", |b| b.iter(|| det.detect(black_box(&s.rgb), &decode).unwrap()));
}

fn evaluation(c: &mut Criterion) {
    let (dets, gts) = ap_problem(100);
    c.bench_function("ap50_100_images", |b| b.iter(|| average_precision_at_50(black_box(&dets), &gts).unwrap()));
}

fn classical(c: &mut Criterion) {
    let s = samples(1).samples.remove(0);
    let mut g = c.benchmark_group("classic");
    for key in ["invert", "invert+equalize", "invert+stretch+blur", "parallel"] {
        let m: ClassicMethod = key.parse().unwrap();
        g.bench_function(key, |b| b.iter(|| m.apply(black_box(&s.ir)).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, detector_step, hallucination_step, inference, evaluation, classical);
criterion_main!(benches);
