use upet_core::checkpoint;
use upet_core::data::{few_shot_split, synth, SynthParams};
use upet_core::model::{Paradigm, PelConfig, PelVariant};
use upet_core::selftrain::{self, SelfTrainConfig};
use upet_core::Error;

fn config(pel: PelConfig) -> SelfTrainConfig {
    SelfTrainConfig {
        iterations: 2,
        teacher_epochs: 30,
        student_epochs: 3,
        hidden: 16,
        pel,
        batch_size: 16,
        seed: 9,
        ..SelfTrainConfig::default()
    }
}

#[test]
fn run_then_checkpoint_round_trip() {
    let d = synth(&SynthParams {
        classes: 3,
        per_class: 60,
        dim: 8,
        sep: 4.0,
        noise_rate: 0.0,
        seed: 9,
    })
    .unwrap();
    let (labeled, unlabeled) = few_shot_split(&d.train, 4, 3, 9).unwrap();
    for pel in [
        PelConfig::new(PelVariant::Adapter { bottleneck: 4 }, Paradigm::Head),
        PelConfig::new(PelVariant::Prefix { count: 3 }, Paradigm::Prompt),
    ] {
        let out = selftrain::run(&config(pel), &labeled, &unlabeled, &d.test).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.scores.len(), 2 * unlabeled.len());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        checkpoint::save(&out.teacher, &path).unwrap();
        let back = checkpoint::load(&path, Some(&pel)).unwrap();
        assert_eq!(back, out.teacher);
        assert_eq!(
            selftrain::evaluate(&back, &d.test).unwrap(),
            out.final_metrics
        );

        let other = PelConfig::new(PelVariant::Ptuning { count: 2 }, Paradigm::Head);
        assert!(matches!(
            checkpoint::load(&path, Some(&other)),
            Err(Error::Config(_))
        ));
    }
}
