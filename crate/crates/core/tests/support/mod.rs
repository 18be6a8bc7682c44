//! Shared by the integration tests here and the acceptance suite; each user
//! needs only part of it.
#![allow(dead_code)]

pub mod blocks;
pub mod oracle;
