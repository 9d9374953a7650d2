use hair::data::{Dataset, TaskConfig};
use hair::train::{batch_gradients, Budget, Checkpoint, TrainConfig, Trainer};
use hair::ModelConfig;

fn small_task() -> Dataset {
    Dataset::build(&TaskConfig {
        train_images: 8,
        val_images: 2,
        image_size: 32,
        ..TaskConfig::smoke()
    })
    .unwrap()
}

fn short(steps: usize) -> TrainConfig {
    TrainConfig {
        budget: Budget::Steps(steps),
        batch: 2,
        patch: 32,
        eval_every: 0,
        ..TrainConfig::toy()
    }
}

#[test]
fn gradient_reaches_every_parameter_group() {
    let data = small_task();
    let trainer = Trainer::new(&ModelConfig::toy(), short(1), &data).unwrap();
    let batch = trainer.batch(0).unwrap();
    let (loss, grads) = batch_gradients(trainer.model(), &batch).unwrap();
    assert!(loss.is_finite() && loss > 0.0);

    let names: Vec<&str> = trainer.model().store().names().collect();
    let groups: [(&str, fn(&str) -> bool); 5] = [
        ("classifier", |n| n.starts_with("dac.")),
        ("selector nets", |n| n.contains(".fcnn.")),
        ("weight boxes", |n| n.ends_with(".box")),
        ("encoder convs", |n| n == "embed.conv" || n.starts_with("down")),
        ("encoder blocks", |n| n.starts_with("enc")),
    ];
    for (group, member) in groups {
        let norm: f64 = names
            .iter()
            .zip(&grads)
            .filter(|(n, _)| member(n))
            .flat_map(|(_, g)| g.data().iter().map(|v| (*v as f64).powi(2)))
            .sum::<f64>()
            .sqrt();
        assert!(norm > 0.0, "{group} received no gradient");
    }
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let data = small_task();
    let config = TrainConfig { lr: 0.0, ..short(4) };
    let mut trainer = Trainer::new(&ModelConfig::toy(), config, &data).unwrap();
    let before = trainer.model().store().clone();
    for _ in 0..4 {
        trainer.step().unwrap();
    }
    assert_eq!(trainer.model().store(), &before);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = small_task();
    let mut full = Trainer::new(&ModelConfig::toy(), short(6), &data).unwrap();
    full.run().unwrap();

    let mut first = Trainer::new(&ModelConfig::toy(), short(6), &data).unwrap();
    for _ in 0..3 {
        first.step().unwrap();
    }
    let saved = Checkpoint::from_bytes(&first.checkpoint().to_bytes()).unwrap();
    let mut second = Trainer::resume(&saved, short(6), &data).unwrap();
    second.run().unwrap();

    assert_eq!(second.checkpoint().to_bytes(), full.checkpoint().to_bytes());
    assert_eq!(&first.log().losses[..], &full.log().losses[..3]);
    assert_eq!(&second.log().losses[..], &full.log().losses[3..]);
}

#[test]
fn loss_falls_over_a_short_run() {
    let data = small_task();
    let mut trainer = Trainer::new(&ModelConfig::toy(), short(120), &data).unwrap();
    trainer.run().unwrap();
    let losses = &trainer.log().losses;
    let head = losses[..20].iter().sum::<f64>() / 20.0;
    let tail = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "mean loss {head:.5} -> {tail:.5}");
}
