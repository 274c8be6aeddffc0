//! Sort-matching and EFDMix on small vectors and a feature batch.
//!
//! Run: `cargo run --release --example style_mixing`

use cudgnet::rng::{stream_rng, Stream};
use cudgnet::style_ops::{
    batch_efdmix_values, efdmix, sort_matching, BatchMixPlan, MixWeight,
};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

fn main() -> cudgnet::Result<()> {
    let content = vec![3.0, 1.0, 2.0, 5.0, 4.0];
    let style = vec![10.0, 30.0, 20.0, 50.0, 40.0];
    println!("content          : {content:?}");
    println!("style            : {style:?}");
    println!(
        "sort_matching    : {:?}",
        sort_matching(&content, &style)?
    );
    for d in [0.0, 0.25, 0.5, 0.75, 1.0] {
        println!(
            "efdmix d={d:<5}: {:?}",
            efdmix(&content, &style, MixWeight::new(d)?)?
        );
    }

    // feature-map mixing: each sample borrows the value distribution of a
    // random batch partner, channel by channel
    let mut rng = stream_rng(7, Stream::StyleMix);
    let h = ArrayD::from_shape_fn(IxDyn(&[4, 2, 4, 4]), |_| rng.gen_range(-2.0..2.0f64));
    let plan = BatchMixPlan::sample(4, 0.1, &mut rng)?;
    println!("\nbatch plan: partners {:?}", plan.perm);
    println!(
        "            d per sample {:?}",
        plan.d.iter().map(|d| (d * 100.0).round() / 100.0).collect::<Vec<_>>()
    );
    let mixed = batch_efdmix_values(&h, &plan)?;
    for b in 0..4 {
        let orig = h.index_axis(ndarray::Axis(0), b);
        let out = mixed.index_axis(ndarray::Axis(0), b);
        let partner = h.index_axis(ndarray::Axis(0), plan.perm[b]);
        println!(
            "sample {b}: mean {:+.3} -> {:+.3} (style partner mean {:+.3}, d = {:.2})",
            orig.mean().unwrap(),
            out.mean().unwrap(),
            partner.mean().unwrap(),
            plan.d[b]
        );
    }
    Ok(())
}
