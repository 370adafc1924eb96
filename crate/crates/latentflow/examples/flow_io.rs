//! Round-trip a flow field through the `.flo` file format, score a
//! perturbed copy with the standard metrics, and write a color-coded
//! visualization as a PPM image.

use latentflow::data::metrics::{aepe, f1_all, zero_flow_aepe};
use latentflow::data::viz::flow_to_image;
use latentflow::data::{flo, ppm, FlowField};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (h, w) = (48, 64);
    let mut field = FlowField::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            // A gentle rotation about the image center.
            let y = r as f32 - h as f32 / 2.0;
            let x = c as f32 - w as f32 / 2.0;
            field.flow[(r * w + c) * 2] = -y * 0.1;
            field.flow[(r * w + c) * 2 + 1] = x * 0.1;
        }
    }

    let dir = std::env::temp_dir().join("latentflow_flow_io");
    std::fs::create_dir_all(&dir)?;
    let flo_path = dir.join("rotation.flo");
    flo::write(&field, &flo_path)?;
    let back = flo::read(&flo_path)?;
    let bitwise = field
        .flow
        .iter()
        .zip(&back.flow)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    println!("wrote {} ({} bytes), bitwise round trip: {bitwise}", flo_path.display(),
        std::fs::metadata(&flo_path)?.len());

    let mut noisy = back.clone();
    for (i, v) in noisy.flow.iter_mut().enumerate() {
        *v += if i % 7 == 0 { 3.5 } else { 0.1 };
    }
    println!("zero-flow baseline AEPE {:.3}", zero_flow_aepe(&field)?);
    println!("noisy copy: AEPE {:.3}, F1-all {:.1}%", aepe(&noisy, &field)?,
        f1_all(&noisy, &field, false)?);

    let img = flow_to_image(&field, None);
    let ppm_path = dir.join("rotation.ppm");
    ppm::write(&img, &ppm_path)?;
    println!("visualization at {}", ppm_path.display());
    Ok(())
}
