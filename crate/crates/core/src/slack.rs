//! Placeholder, implemented bottom-up.
