use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").expect("cargo sets CARGO_MANIFEST_DIR"));
    let header = crate_dir.join("include").join("dcls.h");
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=build.rs");
    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        include_guard: Some("DCLS_H".into()),
        cpp_compat: true,
        usize_is_size_t: true,
        documentation: true,
        enumeration: cbindgen::EnumConfig { prefix_with_name: true, rename_variants: cbindgen::RenameRule::ScreamingSnakeCase, ..Default::default() },
        ..Default::default()
    };
    cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("generate C header")
        .write_to_file(header);
}
