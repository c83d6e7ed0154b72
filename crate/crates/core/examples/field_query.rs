//! Builds a hash-grid field, queries it along a line and backpropagates a
//! density cotangent into the parameters.
//!
//! cargo run --release --example field_query

use ram3d::field::{Field, FieldConfig, FieldCotangent};

fn main() -> ram3d::Result<()> {
    let field = Field::new(FieldConfig::desk())?;
    let params = field.init_params(42);
    let layout = field.layout();
    println!(
        "{} parameters: {} in hash tables, {} in the MLP",
        layout.len(),
        layout.hash_range().len(),
        layout.mlp_range().len()
    );
    println!("level resolutions {:?}", field.config().level_resolutions());

    for i in 0..5 {
        let x = -0.8 + 0.4 * i as f64;
        let out = field.forward([x, 0.1, -0.2], &params)?;
        println!(
            "x = {x:+.1}: density {:.4}, color [{:.3}, {:.3}, {:.3}]",
            out.density, out.color[0], out.color[1], out.color[2]
        );
    }

    let mut grads = field.zero_params();
    let cot = FieldCotangent { color: [0.0; 3], density: 1.0 };
    field.backward([0.2, 0.1, -0.2], &params, &cot, &mut grads)?;
    let touched = grads.values.iter().filter(|g| **g != 0.0).count();
    println!("d density / d params is nonzero in {touched} entries");
    Ok(())
}
