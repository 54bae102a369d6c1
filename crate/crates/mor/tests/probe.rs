use mor::degrade::{degrade_image, DegradationProfile};
use mor::estimator::severity;
use mor::textures::texture;

#[test]
fn probe_aggregate_severity_ordering() {
    let mut d1 = DegradationProfile::deg1();
    d1.scale = 1;
    let mut d2 = DegradationProfile::deg2();
    d2.scale = 1;
    for base in [0u64, 1000, 4000, 9000, 17000] {
        let mut wins = 0usize;
        let mut margin_sum = 0.0;
        for v in 0..50u64 {
            let clean = texture(48, 48, v);
            let (mild, _) = degrade_image(&clean, &d1, base + v).unwrap();
            let (severe, _) = degrade_image(&clean, &d2, base + v).unwrap();
            let sm = severity(&mild).unwrap();
            let ss = severity(&severe).unwrap();
            if ss > sm {
                wins += 1;
            }
            margin_sum += ss - sm;
        }
        println!(
            "seed base {base}: {wins}/50, mean margin {:.4}",
            margin_sum / 50.0
        );
    }
}
