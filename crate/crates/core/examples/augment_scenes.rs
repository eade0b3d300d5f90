//! Weak, strong, CutMix and ClassMix views of synthetic scenes, written as
//! PPM images.
//!
//! Usage: `cargo run --release --example augment_scenes [out_dir]`

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokenmix::augment::{classmix, cutmix, strong_augment, weak_augment, StrongConfig};
use tokenmix::data::{class_color, gen_scene, LabelMap};
use tokenmix::tensor::Tensor;
use tokenmix::Error;

fn write_ppm(path: &Path, image: &Tensor) -> tokenmix::Result<()> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::Contract(format!("{}: {e}", path.display())))
}

fn paint(label: &LabelMap, num_classes: usize) -> Tensor {
    Tensor::from_fn(&[label.height, label.width, 3], |i| {
        class_color(label.data[i / 3], num_classes)[i % 3]
    })
}

fn main() -> tokenmix::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/augment_scenes".into()));
    fs::create_dir_all(&out).map_err(|e| Error::Contract(format!("{}: {e}", out.display())))?;
    let c = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = gen_scene(&mut rng, 32, c)?;
    let b = gen_scene(&mut rng, 32, c)?;
    let (weak, weak_label) = weak_augment(&a.image, Some(&a.label), &mut rng)?;
    let weak_label = weak_label.expect("label was given");
    let strong = strong_augment(&weak, StrongConfig::ALL, &mut rng)?;
    let (cut, cut_label) = cutmix(&a.image, &a.label, &b.image, &b.label, &mut rng)?;
    let (cls, cls_label) = classmix(&a.image, &a.label, &b.image, &b.label, &mut rng)?;

    for (name, image) in [
        ("a", a.image.clone()),
        ("a_label", paint(&a.label, c)),
        ("b", b.image.clone()),
        ("weak", weak),
        ("weak_label", paint(&weak_label, c)),
        ("strong", strong),
        ("cutmix", cut),
        ("cutmix_label", paint(&cut_label, c)),
        ("classmix", cls),
        ("classmix_label", paint(&cls_label, c)),
    ] {
        write_ppm(&out.join(format!("{name}.ppm")), &image)?;
    }
    println!("class histogram a:        {:?}", a.label.histogram(c));
    println!("class histogram weak(a):  {:?}", weak_label.histogram(c));
    println!("class histogram cutmix:   {:?}", cut_label.histogram(c));
    println!("class histogram classmix: {:?}", cls_label.histogram(c));
    println!("images written to {}", out.display());
    Ok(())
}
