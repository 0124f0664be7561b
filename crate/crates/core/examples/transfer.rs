//! Moving a pre-trained model to a target space that shares some names
//! with the source and introduces others. Shared names keep their
//! embeddings; new ones are initialized by mixing two source embeddings.

use ftdkl::bench::{make_source_corpus_ackley, AckleyInstance};
use ftdkl::surrogate::{pretrain, TrainConfig};
use ftdkl::transfer::{build_target_model, MixOrigin};

fn main() -> ftdkl::Result<()> {
    let source = AckleyInstance::new(4, 0);
    let corpus = make_source_corpus_ackley(&source, 200, 0)?;
    let cfg = TrainConfig {
        epochs_mse: 40,
        epochs_elbo: 10,
        ..TrainConfig::desk()
    };
    let (model, _) = pretrain(&[corpus], &cfg)?;

    let target = AckleyInstance::new(6, 0);
    let (transferred, report) = build_target_model(&model, &target.space(), 42)?;
    println!("copied: {:?}", report.copied_names);
    for m in &report.mixed_names {
        match &m.origin {
            MixOrigin::Mixup { first, second, alpha } => {
                println!("{}: {alpha:.3} * {first} + {:.3} * {second}", m.name, 1.0 - alpha)
            }
            other => println!("{}: {other:?}", m.name),
        }
    }

    // The source is untouched and still serves its own space.
    let x = vec![0.1, -0.2, 0.3, 0.0];
    let before = model.predict(&source.space(), &[x.clone()])?[0];
    let after = transferred.predict(&source.space(), &[x])?[0];
    println!("source-space prediction before {:.4}, after transfer {:.4}", before.mean, after.mean);
    println!("report as JSON: {}", serde_json::to_string(&report)?);
    Ok(())
}
