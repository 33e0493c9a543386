use sassl_core::adversary::relation_matrix;
use sassl_core::experiment::{build_trainer, pretrain, PretrainConfig};
use sassl_core::rng::mix_seed;
use sassl_core::ssl::{EncoderConfig, SslConfig};
use sassl_core::synth::{
    generate_dataset, sample_batch, AugmentConfig, Dataset, DatasetConfig, RenderConfig,
};

fn small_data() -> Dataset {
    generate_dataset(&DatasetConfig {
        seed: 11,
        n_slides: 4,
        patches_per_slide: 6,
        perturbation: 0.4,
        render: RenderConfig {
            size: 24,
            classes: 2,
        },
    })
    .unwrap()
}

fn small_config(ssl: SslConfig, sassl: bool, lambda: f64) -> PretrainConfig {
    let mut cfg = PretrainConfig {
        seed: 5,
        encoder: EncoderConfig {
            feature_dim: 8,
            ..EncoderConfig::default()
        },
        ssl,
        augment: AugmentConfig {
            crop: 20,
            ..AugmentConfig::default()
        },
        batch: 8,
        per_slide: 2,
        steps: 20,
        ..PretrainConfig::default()
    };
    cfg.ssl.queue_capacity = 16;
    cfg.train.sassl = sassl;
    cfg.train.lambda_adv = lambda;
    cfg
}

#[test]
fn zero_lambda_matches_plain_ssl() {
    let data = small_data();
    for ssl in [SslConfig::simsiam(), SslConfig::infonce()] {
        let plain = pretrain(&small_config(ssl.clone(), false, 1.0), &data, |_, _| {}).unwrap();
        let mut ssl_losses = Vec::new();
        let adv = pretrain(&small_config(ssl, true, 0.0), &data, |_, l| {
            ssl_losses.push(l.ssl)
        })
        .unwrap();
        assert_eq!(plain.generator, adv.generator);
        assert!(ssl_losses.iter().all(|l| l.is_finite()));
    }
}

#[test]
fn phases_touch_only_their_own_parameters() {
    let data = small_data();
    let cfg = small_config(SslConfig::simsiam(), true, 1.0);
    let mut trainer = build_trainer(&cfg).unwrap();
    for t in 0..10u64 {
        let batch = sample_batch(&data, 8, 2, &cfg.augment, mix_seed(1, &[t])).unwrap();
        let relation = relation_matrix(&batch.slide_ids).unwrap();

        let g = trainer.generator.digest();
        let d = trainer.discriminator.as_ref().unwrap().params.digest();
        trainer.discriminator_step(&batch, &relation).unwrap();
        assert_eq!(g, trainer.generator.digest());
        assert_ne!(d, trainer.discriminator.as_ref().unwrap().params.digest());

        let d = trainer.discriminator.as_ref().unwrap().params.digest();
        trainer.generator_step(&batch).unwrap();
        assert_eq!(d, trainer.discriminator.as_ref().unwrap().params.digest());
        assert_ne!(g, trainer.generator.digest());
    }
}

#[test]
fn discriminator_alone_lowers_its_loss() {
    let data = small_data();
    let cfg = small_config(SslConfig::simsiam(), true, 1.0);
    let mut trainer = build_trainer(&cfg).unwrap();
    let batch = sample_batch(&data, 8, 2, &cfg.augment, 3).unwrap();
    let relation = relation_matrix(&batch.slide_ids).unwrap();
    let start = trainer.evaluate_loss_d(&batch).unwrap();
    let g = trainer.generator.digest();
    for _ in 0..50 {
        trainer.discriminator_step(&batch, &relation).unwrap();
    }
    let end = trainer.evaluate_loss_d(&batch).unwrap();
    assert!(end < start, "L_D went from {start} to {end}");
    assert_eq!(g, trainer.generator.digest());
}

#[test]
fn runs_are_reproducible() {
    let data = small_data();
    let cfg = small_config(SslConfig::infonce(), true, 1.0);
    let mut l1 = Vec::new();
    let mut l2 = Vec::new();
    let a = pretrain(&cfg, &data, |_, l| l1.push(*l)).unwrap();
    let b = pretrain(&cfg, &data, |_, l| l2.push(*l)).unwrap();
    assert_eq!(a.generator.digest(), b.generator.digest());
    assert_eq!(
        a.discriminator.as_ref().unwrap().params.digest(),
        b.discriminator.as_ref().unwrap().params.digest()
    );
    assert_eq!(l1, l2);
}

#[test]
fn losses_stay_finite_and_bounded() {
    let data = small_data();
    let cfg = small_config(SslConfig::simsiam(), true, 1.0);
    pretrain(&cfg, &data, |_, l| {
        assert!((0.0..=2.0).contains(&l.ssl));
        let d = l.discriminator.unwrap();
        assert!((-1.0..=1.0).contains(&d));
        assert!(l.generator <= l.ssl);
    })
    .unwrap();
}
