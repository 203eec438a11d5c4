use conceptmix_wasm::demo::{self, Schedule};

const CAPTIONS: &str = "a photo of a circle, large\n\na photo of a circle, small\na photo of a circle, dim\n";
const SCHEDULE: Schedule = Schedule {
    steps: 200,
    beta_start: 1e-4,
    beta_end: 0.02,
};

#[test]
fn mix_sources_label_every_cell_with_a_caption() {
    assert_eq!(demo::parse_lines(CAPTIONS).len(), 3);
    let sources = demo::mix_sources(CAPTIONS, 16, 32, 1, 2, 9).unwrap();
    assert_eq!(sources.len(), 16 * 32);
    assert!(sources.iter().all(|&k| k < 3));
    assert_eq!(sources, demo::mix_sources(CAPTIONS, 16, 32, 1, 2, 9).unwrap());

    let unmixed = demo::mix_sources(CAPTIONS, 4, 4, 0, 0, 9).unwrap();
    assert!(unmixed.iter().all(|&k| k == unmixed[0]));
}

#[test]
fn mix_sources_rejects_bad_input() {
    assert!(demo::mix_sources("only one", 4, 4, 1, 1, 0).is_err());
    assert!(demo::mix_sources(CAPTIONS, 100, 100, 1, 1, 0).is_err());
}

#[test]
fn schedule_curve_decreases() {
    let bars = demo::alpha_bars(200, 1e-4, 0.02).unwrap();
    assert_eq!(bars.len(), 200);
    assert!(bars.windows(2).all(|w| w[1] < w[0]));
    assert!((bars[199] - 0.13218).abs() < 1e-4);
}

#[test]
fn shape_pixels_and_noise() {
    let clean = demo::shape_rgba("cross", 32, 3, 0, SCHEDULE).unwrap();
    assert_eq!(clean.len(), 32 * 32 * 4);
    assert!(clean.chunks(4).all(|p| p[0] == p[1] && p[1] == p[2] && p[3] == 255));
    assert!(clean.chunks(4).any(|p| p[0] > 100));
    let noisy = demo::shape_rgba("cross", 32, 3, 200, SCHEDULE).unwrap();
    assert_ne!(clean, noisy);
    assert!(demo::shape_rgba("hexagon", 32, 3, 0, SCHEDULE).is_err());
    assert!(demo::shape_rgba("cross", 4, 3, 0, SCHEDULE).is_err());
    assert!(demo::shape_caption("square", 32, 3).unwrap().contains("square"));
}
