use lensless::grid::RealImage;
use lensless::io;
use lensless::optics::{Normalization, Psf};

fn ramp(h: usize, w: usize, c: usize) -> RealImage {
    let n = (h * w * c) as f64;
    RealImage::from_vec(h, w, c, (0..h * w * c).map(|i| i as f64 / n).collect()).unwrap()
}

#[test]
fn png_8_and_16_bit_quantization() {
    let dir = tempfile::tempdir().unwrap();
    for c in [1, 3] {
        let img = ramp(9, 7, c);
        let p8 = dir.path().join(format!("a{c}.png"));
        let p16 = dir.path().join(format!("b{c}.png"));
        io::write_png8(&p8, &img).unwrap();
        io::write_png16(&p16, &img).unwrap();
        let r8 = io::read_image(&p8).unwrap();
        let r16 = io::read_image(&p16).unwrap();
        assert_eq!(r8.dims(), img.dims());
        for (a, (b, c)) in img.as_slice().iter().zip(r8.as_slice().iter().zip(r16.as_slice())) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            assert!((a - c).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }
}

#[test]
fn npy_round_trip_through_f32() {
    let dir = tempfile::tempdir().unwrap();
    let img = ramp(5, 6, 3);
    let path = dir.path().join("x.npy");
    io::write_npy(&path, &img).unwrap();
    let back = io::read_npy(&path).unwrap();
    assert_eq!(back.dims(), (5, 6, 3));
    for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
        assert_eq!(*b, *a as f32 as f64);
    }
}

#[test]
fn psf_keeps_normalization_via_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let psf = Psf::from_image(ramp(8, 8, 1).map(|v| v + 0.1), Normalization::Raw).unwrap();
    let path = dir.path().join("p.npy");
    io::save_psf(&path, &psf).unwrap();
    assert!(io::sidecar_path(&path).exists());
    let back = io::load_psf(&path).unwrap();
    assert_eq!(back.dims(), (8, 8));
    assert!((back.image().sum() - psf.image().sum()).abs() < 1e-5);
}
