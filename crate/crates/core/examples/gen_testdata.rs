//! Regenerates the shipped catalog, term, and instance files under
//! testdata/ at the workspace root.

use std::fs;
use std::path::PathBuf;

use subpower_core::algebra::catalog_to_json;
use subpower_core::circuit::term_to_json;
use subpower_core::samples;
use subpower_core::solver::{instance_to_json, SmpInstance};

fn main() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../testdata");
    fs::create_dir_all(&dir).unwrap();
    let write = |name: &str, text: String| {
        fs::write(dir.join(name), text + "\n").unwrap();
        println!("wrote {name}");
    };

    for names in [
        &["Z2"][..],
        &["Z3"][..],
        &["Z4"][..],
        &["Z2xZ2"][..],
        &["S3"][..],
        &["Q8"][..],
    ] {
        let cat = samples::maltsev_catalog(names);
        let file = format!("{}.json", names[0].to_lowercase());
        write(&file, catalog_to_json(&cat).unwrap());
    }
    let all = samples::maltsev_catalog(&["Z2", "Z3", "Z4", "Z2xZ2", "S3"]);
    write("groups.json", catalog_to_json(&all).unwrap());
    write(
        "lattice2.json",
        catalog_to_json(&samples::lattice_catalog()).unwrap(),
    );
    write(
        "maj2.json",
        catalog_to_json(&samples::majority_catalog()).unwrap(),
    );

    let m_sig = all.signature.clone();
    write(
        "maltsev_p.json",
        term_to_json(&m_sig, &samples::maltsev_p(&m_sig)).unwrap(),
    );
    let l_sig = samples::lattice_catalog().signature.clone();
    write(
        "lattice_p.json",
        term_to_json(&l_sig, &samples::lattice_maj_p(&l_sig)).unwrap(),
    );
    let maj_sig = samples::majority_catalog().signature.clone();
    write(
        "maj_p.json",
        term_to_json(&maj_sig, &samples::majority_p(&maj_sig)).unwrap(),
    );

    let yes = SmpInstance {
        factors: vec!["Z2".into(), "Z2".into(), "Z2".into()],
        generators: vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]],
        target: vec![1, 1, 1],
    };
    write("odd_coset_yes.json", instance_to_json(&yes).unwrap());
    let no = SmpInstance {
        target: vec![1, 1, 0],
        ..yes.clone()
    };
    write("odd_coset_no.json", instance_to_json(&no).unwrap());
}
