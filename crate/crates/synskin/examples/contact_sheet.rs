//! Writes a grid of generated samples (image over lesion mask) to a PNG.

use synskin::{SynSkinConfig, SynSkinGenerator};

fn main() {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "contact_sheet.png".into());
    let n: u32 = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);
    let g = SynSkinGenerator::new(SynSkinConfig::default()).expect("default config");
    let s = g.image_size() as u32;
    let mut sheet = image::RgbImage::new(s * n, s * 2);
    for i in 0..n {
        let sample = g.generate(i as u64).expect("sample");
        image::imageops::replace(&mut sheet, &sample.image, (i * s) as i64, 0);
        for (k, v) in sample.border_mask.data().iter().enumerate() {
            let (x, y) = (k as u32 % s, k as u32 / s);
            let base = if sample.lesion_mask.data()[k] { 128 } else { 0 };
            let px = if *v { [255, 255, 0] } else { [base; 3] };
            sheet.put_pixel(i * s + x, s + y, image::Rgb(px));
        }
    }
    sheet.save(&out).expect("write sheet");
}
