pub mod dedup_oracle;
pub mod fixtures;
