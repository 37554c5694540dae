use std::fs;
use std::path::Path;

use kdv_mz::experiment::{cmd_derive, ExperimentConfig};
use kdv_mz::symbolic::{complete_memory_operator_terms, memory_term};

fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn operator_polynomials_match_golden_files() {
    for poly in complete_memory_operator_terms(4) {
        let i = poly.order;
        assert_eq!(
            format!("{poly}\n"),
            golden(&format!("operator_order{i}.txt")),
            "order {i}"
        );
        assert_eq!(
            format!("{}\n", poly.to_sexpr()),
            golden(&format!("operator_order{i}.sexpr")),
            "order {i}"
        );
    }
}

#[test]
fn t_model_tree_matches_golden_file() {
    let tree = memory_term(1).unwrap();
    assert_eq!(
        format!("{}\n", tree.to_sexpr_shared()),
        golden("tmodel.sexpr")
    );
    assert_eq!(tree.to_sexpr(), "(+ (* 2 (chat u (ctilde u u))))");
    assert_eq!(
        format!("{}\n", memory_term(2).unwrap().to_sexpr_shared()),
        golden("memory_order2.sexpr")
    );
}

#[test]
fn derive_writes_golden_content() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        out: dir.path().to_path_buf(),
        derive_order: 4,
        ..ExperimentConfig::default()
    };
    let report = cmd_derive(&config).unwrap();
    assert_eq!(report.polynomials.len(), 4);
    assert!(report.bch_agreement.iter().all(|b| *b));
    assert!(
        report.equivalence.iter().all(|e| e.passed),
        "{:?}",
        report.equivalence
    );
    for i in 1..=4 {
        let written =
            fs::read_to_string(dir.path().join(format!("operator_order{i}.txt"))).unwrap();
        assert_eq!(written, golden(&format!("operator_order{i}.txt")));
        let json = fs::read_to_string(dir.path().join(format!("memory_order{i}.json"))).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(v.is_object());
    }
    assert_eq!(
        fs::read_to_string(dir.path().join("memory_order1.sexpr")).unwrap(),
        golden("tmodel.sexpr")
    );
}
