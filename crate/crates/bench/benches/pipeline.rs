use criterion::{black_box, criterion_group, criterion_main, Criterion};
use hazeforge::autodiff::{Graph, ParamStore};
use hazeforge::committee::{
    build_committee, ActiveLosses, AblationMode, CommitteeSetup, KlDirection, LossWeights, Phase, ScVariant,
};
use hazeforge::eval::{ciede2000, psnr, ssim, NiqeConfig, NiqeModel};
use hazeforge::model::{depths_to_tensor, images_to_tensor, DehazeNet, FeatureExtractor, NetworkConfig};
use hazeforge::synth::{generate_dataset, DatasetConfig, PairedSample};

fn dataset(n: usize, size: usize) -> Vec<PairedSample> {
    let cfg = DatasetConfig {
        train_count: n,
        test_count: 0,
        height: size,
        width: size,
        ..Default::default()
    };
    generate_dataset(&cfg, 1).expect("dataset").samples
}

fn bench_synth(c: &mut Criterion) {
    let cfg = DatasetConfig {
        train_count: 8,
        test_count: 0,
        ..Default::default()
    };
    c.bench_function("synth/8 pairs 64x64", |b| b.iter(|| generate_dataset(black_box(&cfg), 1).unwrap()));
}

fn committee_step(c: &mut Criterion) {
    let samples = dataset(8, 64);
    let (net, store): (DehazeNet, ParamStore<f32>) = DehazeNet::init(NetworkConfig::default()).unwrap();
    let features = FeatureExtractor::new(NetworkConfig::default().feature_seed);
    let hazy: Vec<_> = samples.iter().map(|s| &s.synthetic_hazy).collect();
    let depth: Vec<_> = samples.iter().map(|s| &s.depth).collect();
    let x = images_to_tensor::<f32>(&hazy).unwrap();
    let t = depths_to_tensor::<f32>(&depth).unwrap();

    let mut group = c.benchmark_group("train step, batch 8 64x64");
    group.sample_size(20);
    group.bench_function("forward only", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xi = g.input(x.clone()).unwrap();
            net.forward_frozen(&mut g, &store, xi).unwrap().clean
        })
    });
    for (name, mode, phase) in [
        ("warm-up fwd+bwd", AblationMode::M1, Phase::Warmup),
        ("committee m4 fwd+bwd", AblationMode::M4, Phase::Committee),
    ] {
        let setup = CommitteeSetup {
            weights: LossWeights::default(),
            active: ActiveLosses::for_phase(mode, phase),
            sc_variant: ScVariant::default(),
            kl_direction: KlDirection::default(),
        };
        group.bench_function(name, |b| {
            let mut store = store.clone();
            b.iter(|| {
                let mut g = Graph::new();
                let xi = g.input(x.clone()).unwrap();
                let ti = g.input(t.clone()).unwrap();
                let terms = build_committee(&mut g, &net, &store, &features, xi, ti, &setup).unwrap();
                store.zero_grads();
                g.backward(terms.total, Some(&mut store)).unwrap();
            })
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let samples = dataset(64, 64);
    let (a, b) = (&samples[0].ideal_clean, &samples[0].synthetic_hazy);
    c.bench_function("metrics/psnr 64x64", |bch| bch.iter(|| psnr(black_box(a), black_box(b)).unwrap()));
    c.bench_function("metrics/ssim 64x64", |bch| bch.iter(|| ssim(black_box(a), black_box(b)).unwrap()));
    c.bench_function("metrics/ciede2000 64x64", |bch| bch.iter(|| ciede2000(black_box(a), black_box(b)).unwrap()));

    let corpus: Vec<_> = samples.iter().map(|s| &s.ideal_clean).collect();
    let mut group = c.benchmark_group("niqe");
    group.sample_size(10);
    group.bench_function("fit 64 images", |bch| bch.iter(|| NiqeModel::fit(&corpus, NiqeConfig::default()).unwrap()));
    let model = NiqeModel::fit(&corpus, NiqeConfig::default()).unwrap();
    group.bench_function("score 64x64", |bch| bch.iter(|| model.score(black_box(b)).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_synth, committee_step, metrics);
criterion_main!(benches);
