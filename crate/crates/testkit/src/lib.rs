//! Placeholder, filled in as oracles land.
