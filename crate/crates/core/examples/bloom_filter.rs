//! Bloom-signature filtering on a tiny named catalog, compared with the
//! exact forward index.

use filtra::bitmask::BitMask;
use filtra::catalog::{Catalog, FeatureDictionary, FeatureValue, Item};
use filtra::filter::{compile_filter, eval_compiled, forward_eval, parse_filter, BloomIndex, BloomParams, ForwardIndex};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut dict = FeatureDictionary::default();
    dict.insert_feature(1, "country");
    dict.insert_feature(2, "lang");
    for (i, c) in ["US", "CA", "BR"].iter().enumerate() {
        dict.insert_value(1, *c, i as u64);
    }
    for (i, l) in ["EN", "ES", "PT", "FR"].iter().enumerate() {
        dict.insert_value(2, *l, i as u64);
    }
    let rows = [(0, 0), (0, 1), (1, 0), (1, 3), (2, 2), (0, 1), (2, 1), (1, 3)];
    let items = rows
        .iter()
        .enumerate()
        .map(|(i, &(c, l))| Item::new(i as u64, vec![FeatureValue::new(1, c), FeatureValue::new(2, l)], vec![1.0]))
        .collect();
    let catalog = Catalog::new(items, 1, dict)?;

    let params = BloomParams::new(64, 3)?;
    let bloom = BloomIndex::for_catalog(&catalog, params);
    let forward = ForwardIndex::for_catalog(&catalog);
    println!("{} plane bytes for {} items", bloom.plane_bytes(), catalog.len());

    for text in [
        r#"country = "US" AND (lang = "EN" OR lang = "ES")"#,
        r#"NOT lang = "EN""#,
        r#"country = "BR" OR lang = "FR""#,
    ] {
        let expr = parse_filter(text, catalog.dictionary())?;
        let cf = compile_filter(&expr, &params);
        let approx = eval_compiled(&cf, &bloom, &BitMask::ones(catalog.len()), None);
        let exact = forward_eval(&forward, &expr, None);
        println!("{text}");
        println!("  bloom {:?}", approx.iter_ones().collect::<Vec<_>>());
        println!("  exact {:?}", exact.iter_ones().collect::<Vec<_>>());
    }
    Ok(())
}
