//! State-space calibration (placeholder).
