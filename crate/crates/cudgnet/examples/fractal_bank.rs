//! Render a bank of IFS fractals to PNG files. The resulting directory can
//! be passed to training via `fractal_bank = "<dir>"` in the config so every
//! machine sees the same operands.
//!
//! Run: `cargo run --release --example fractal_bank -- [count] [out_dir]`

use cudgnet::transform::generate_fractal;

fn main() -> cudgnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let count: u64 = args
        .next()
        .and_then(|s| s.parse().ok())
        .unwrap_or(16);
    let out_dir = std::path::PathBuf::from(
        args.next().unwrap_or_else(|| "target/fractal_bank".to_string()),
    );
    std::fs::create_dir_all(&out_dir)?;

    for seed in 0..count {
        let fractal = generate_fractal(seed, (32, 32))?;
        let mut img = image::RgbImage::new(32, 32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            for c in 0..3 {
                px.0[c] = (fractal.pixels[[c, y as usize, x as usize]] * 255.0).round() as u8;
            }
        }
        let path = out_dir.join(format!("fractal_{seed:04}.png"));
        img.save(&path)
            .map_err(|e| cudgnet::Error::Other(format!("{}: {e}", path.display())))?;
    }
    println!("wrote {count} fractals to {}", out_dir.display());
    Ok(())
}
