use addm_demo::{lesion_phantom_inner, noised_phantom_inner, schedule_curves_inner};

#[test]
fn curves_have_three_series() {
    let c = schedule_curves_inner(100, 1e-4, 0.02).unwrap();
    assert_eq!(c.len(), 300);
    assert!((c[0] - 1e-4).abs() < 1e-15 && (c[99] - 0.02).abs() < 1e-15);
    assert!(c[100..200].windows(2).all(|w| w[1] < w[0]));
    assert!(schedule_curves_inner(0, 1e-4, 0.02).is_err());
}

#[test]
fn noising_destroys_structure() {
    let clean = noised_phantom_inner(32, 3, 300, 0, 1).unwrap();
    assert_eq!(clean.len(), 32 * 32 * 4);
    assert_eq!(&clean[..4], &[0, 0, 0, 255]);
    let mild = noised_phantom_inner(32, 3, 300, 10, 1).unwrap();
    let heavy = noised_phantom_inner(32, 3, 300, 300, 1).unwrap();
    let dist = |a: &[u8], b: &[u8]| a.iter().zip(b).map(|(&x, &y)| (x as i32 - y as i32).abs()).sum::<i32>();
    assert!(dist(&clean, &mild) < dist(&clean, &heavy));
    assert_eq!(mild, noised_phantom_inner(32, 3, 300, 10, 1).unwrap());
    assert!(noised_phantom_inner(32, 3, 300, 301, 1).is_err());
}

#[test]
fn lesion_overlay_is_red() {
    let plain = lesion_phantom_inner(32, 0, 0, false).unwrap();
    let tinted = lesion_phantom_inner(32, 0, 0, true).unwrap();
    let red = tinted.chunks(4).filter(|p| p[0] == 255 && p[1] < 255).count();
    assert!(red > 0);
    assert!(plain.chunks(4).all(|p| p[0] == p[1] && p[1] == p[2]));
}
