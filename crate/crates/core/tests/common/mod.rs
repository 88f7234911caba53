pub use bevtrack::oracle::{max_abs_diff, random_cost_instance, random_integer_matrix, to_rows};
