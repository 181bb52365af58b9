use std::collections::BTreeSet;

use refsketch::backends::fixtures;
use refsketch::inversion::replay_reconstruct;
use refsketch::pipeline::*;
use refsketch::*;

fn dog() -> Image {
    fixtures::content("dog").unwrap()
}

fn hatch() -> Image {
    fixtures::reference("hatch").unwrap()
}

fn short() -> PipelineConfig {
    PipelineConfig::default().with_total_steps(20)
}

#[test]
fn neutralized_run_replays_content() {
    let b = Backends::toy();
    let cfg = neutralized(&short());
    let r = generate_sketch(&dog(), &hatch(), &cfg, &b).unwrap();
    let p = prepare(&dog(), &hatch(), &cfg, &b).unwrap();
    let z0 = replay_reconstruct(&p.content, b.diffusion.as_ref()).unwrap();
    let err = r.final_latent.iter().zip(z0.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-4, "{err}");
    assert!(r.interventions.events.is_empty());
}

#[test]
fn bundle_starts_from_content_latent() {
    let b = Backends::toy();
    let cfg = short();
    let p = prepare(&dog(), &hatch(), &cfg, &b).unwrap();
    let t = p.schedule.latent_index(p.schedule.first_step());
    assert_eq!(&p.bundle.z_ske_t, p.content.latent_at(t));
    assert_eq!(p.bundle.caption, "a sketch of a dog");
    assert_eq!(p.bundle.contour.channels(), 1);
    let full = prepare(&dog(), &hatch(), &PipelineConfig { skip_steps: 0, ..cfg }, &b).unwrap();
    assert_eq!(&full.bundle.z_ske_t, full.content.z_t());
}

#[test]
fn result_metadata() {
    let b = Backends::toy();
    let cfg = short();
    let r = generate_sketch(&dog(), &hatch(), &cfg, &b).unwrap();
    assert_eq!((r.image.width(), r.image.height()), (dog().width(), dog().height()));
    assert_eq!(r.trace_meta.config_hash, r.config.hash());
    assert_eq!(r.trace_meta.seed, 42);
    assert_eq!(r.trace_meta.step_timings.len(), cfg.total_steps - cfg.skip_steps);
    assert!(r.warnings.is_empty());
    let again = generate_sketch(&dog(), &hatch(), &cfg, &b).unwrap();
    assert_eq!(r.png_bytes().unwrap(), again.png_bytes().unwrap());
    assert_eq!(r.final_latent, again.final_latent);
}

#[test]
fn windows_bound_every_intervention() {
    let b = Backends::toy();
    let cfg = PipelineConfig {
        skip_steps: 0,
        ..PipelineConfig::default()
    };
    let r = generate_sketch(&dog(), &hatch(), &cfg, &b).unwrap();
    let log = &r.interventions;
    let within = |steps: BTreeSet<usize>, lo: usize, hi: usize| !steps.is_empty() && steps.iter().all(|&s| lo <= s && s <= hi);
    assert!(within(log.steps(InterventionKind::KvInjection, Some(32)), 10, 70));
    assert!(within(log.steps(InterventionKind::KvInjection, Some(64)), 10, 90));
    assert!(within(log.steps(InterventionKind::QueryBlend, None), 10, 90));
    assert!(within(log.steps(InterventionKind::Guidance, None), 20, 100));
    assert_eq!(log.steps(InterventionKind::Guidance, None).len(), 81);
    assert_eq!(log.steps(InterventionKind::KvInjection, Some(64)), (20..=90).collect());
}

#[test]
fn background_stays_near_neutral_run() {
    let b = Backends::toy();
    let cfg = short();
    let half = ForegroundMask::from_fn(8, |p| p / 8 < 4);
    let opts = RunOptions {
        mask_override: Some(half),
    };
    let guided = generate_with(&dog(), &hatch(), &cfg, &b, &opts).unwrap();
    let plain = generate_with(&dog(), &hatch(), &neutralized(&cfg), &b, &opts).unwrap();
    let (c, h, w) = guided.final_latent.dim();
    let (mut fg, mut bg) = (0.0, 0.0);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let d = (guided.final_latent[[ch, y, x]] - plain.final_latent[[ch, y, x]]).abs();
                if y < h / 2 {
                    fg += d;
                } else {
                    bg += d;
                }
            }
        }
    }
    assert!(bg < fg, "background {bg} vs foreground {fg}");
}

#[test]
fn empty_mask_matches_disabled_stroke_attention() {
    let b = Backends::toy();
    let cfg = short();
    let opts = RunOptions {
        mask_override: Some(ForegroundMask::empty(8)),
    };
    let masked = generate_with(&dog(), &hatch(), &cfg, &b, &opts).unwrap();
    let no_csa = generate_with(&dog(), &hatch(), &ablate(&cfg, &[Module::Csa].into()), &b, &opts).unwrap();
    let err = masked.final_latent.iter().zip(no_csa.final_latent.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-9, "{err}");
}

#[test]
fn blank_reference_warns_but_runs() {
    let b = Backends::toy();
    let r = generate_sketch(&dog(), &fixtures::reference("blank").unwrap(), &short(), &b).unwrap();
    assert_eq!(r.warnings.len(), 1);
    assert!(r.warnings[0].contains("blank"));
}

#[test]
fn color_reference_gives_color_output() {
    let b = Backends::toy();
    let ink = fixtures::reference("ink").unwrap();
    assert_eq!(ink.channels(), 3);
    let r = generate_sketch(&dog(), &ink, &short(), &b).unwrap();
    assert_eq!(r.image.channels(), 3);
}

#[test]
fn errors_carry_stage_labels() {
    let b = Backends::toy();
    let empty = Image::new(0, 0, 3, vec![]).unwrap();
    let err = generate_sketch(&empty, &hatch(), &short(), &b).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "contour", .. }), "{err}");
    let bad = PipelineConfig { gamma: 2.0, ..short() };
    assert!(matches!(generate_sketch(&dog(), &hatch(), &bad, &b), Err(Error::Config(_))));
}

#[test]
fn ablation_names() {
    let c = PipelineConfig::default();
    for m in Module::ALL {
        assert_eq!(m.to_string().parse::<Module>().unwrap(), m);
    }
    let csa = ablate_by_name(&c, &["csa"]).unwrap();
    assert!(!csa.csa_enabled);
    let dam = ablate_by_name(&c, &["DAM"]).unwrap();
    assert!(!dam.dam_enabled);
    let spm = ablate_by_name(&c, &["SPM"]).unwrap();
    assert_eq!((spm.gamma, spm.lambda_sem), (0.0, 0.0));
}
