//! Apply the Transformation Component to one image and save every branch's
//! output, plus a few full TC draws, as PNGs.
//!
//! Run: `cargo run --release --example transform_gallery -- [out_dir]`

use cudgnet::rng::{stream_rng, Stream};
use cudgnet::synth;
use cudgnet::transform::{
    apply_branch, apply_tc, generate_fractal, random_affine, FractalSource, TcBranch, TcConfig,
};
use ndarray::Axis;

fn save_png(img: &cudgnet::tape::Arr, path: &std::path::Path) -> cudgnet::Result<()> {
    let mut out = image::RgbImage::new(32, 32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        for c in 0..3 {
            px.0[c] = (img[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out.save(path)
        .map_err(|e| cudgnet::Error::Other(format!("{}: {e}", path.display())))
}

fn main() -> cudgnet::Result<()> {
    let out_dir = std::path::PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "target/tc_gallery".to_string()),
    );
    std::fs::create_dir_all(&out_dir)?;

    // one synthetic source image
    let ds = synth::dataset(10, 0);
    let (batch, _) = ds.batch(&[3]);
    let x = batch.index_axis(Axis(0), 0).to_owned().into_dyn();
    save_png(&x, &out_dir.join("0_input.png"))?;

    let cfg = TcConfig::default();
    let mut rng = stream_rng(1, Stream::Transform);

    let f1 = generate_fractal(11, (32, 32))?.pixels;
    let f2 = generate_fractal(22, (32, 32))?.pixels;
    save_png(&f1, &out_dir.join("1_fractal.png"))?;
    let x_aff = random_affine(&x, &cfg, &mut rng);
    save_png(&x_aff, &out_dir.join("2_affine.png"))?;

    for (name, branch) in [
        ("3_branch_add", TcBranch::AddFractal),
        ("4_branch_add_mul", TcBranch::AddFractalMulAffine),
        ("5_branch_full", TcBranch::Full),
    ] {
        let y = apply_branch(&x, branch, &f1, &x_aff, &f2);
        save_png(&y, &out_dir.join(format!("{name}.png")))?;
    }

    for k in 0..4 {
        let y = apply_tc(&x, &cfg, &mut rng, &FractalSource::Generated)?;
        save_png(&y, &out_dir.join(format!("6_tc_draw_{k}.png")))?;
    }
    println!("gallery written to {}", out_dir.display());
    Ok(())
}
