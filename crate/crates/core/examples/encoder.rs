//! Tokenizing rows of a mixed numeric and categorical space and running
//! them through the transformer encoder.

use ftdkl::data::{Param, ParamSpace};
use ftdkl::encoder::{EmbeddingRegistry, EncoderConfig, EncoderParams, TokenBatch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ftdkl::Result<()> {
    let space = ParamSpace::new(vec![
        Param::numeric("learning_rate", -4.0, -1.0),
        Param::integer("depth", 1.0, 12.0),
        Param::categorical("booster", vec!["gbtree".into(), "dart".into(), "linear".into()]),
    ])?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = EncoderConfig::desk();
    let mut registry = EmbeddingRegistry::new(cfg.d_embed, &mut rng);
    registry.add_numeric("learning_rate", &mut rng)?;
    registry.add_numeric("depth", &mut rng)?;
    registry.add_categorical("booster", &["gbtree".into(), "dart".into(), "linear".into()], &mut rng)?;
    let encoder = EncoderParams::new(cfg, &mut rng)?;
    println!("encoder parameters: {}", encoder.parameter_count());

    let rows: Vec<Vec<f64>> = (0..4).map(|_| space.sample(&mut rng)).collect();
    let batch = TokenBatch::new(space.names(), rows.clone())?;
    let z = encoder.encode(&registry, &batch, true)?;
    println!("{} rows -> {} x {} [CLS] states", rows.len(), z.rows(), z.cols());
    for (r, row) in rows.iter().enumerate() {
        let head: Vec<String> = z.row_slice(r)[..4].iter().map(|v| format!("{v:+.3}")).collect();
        println!("{row:?} -> [{} ...]", head.join(", "));
    }

    // Column order does not matter: a sequence is a set of named tokens.
    let reordered = TokenBatch::new(
        vec!["booster".into(), "learning_rate".into(), "depth".into()],
        rows.iter().map(|r| vec![r[2], r[0], r[1]]).collect(),
    )?;
    let z2 = encoder.encode(&registry, &reordered, true)?;
    let diff = z.data().iter().zip(z2.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("max difference after reordering columns: {diff:.1e}");
    Ok(())
}
