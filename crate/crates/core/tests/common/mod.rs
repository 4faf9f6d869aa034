#![allow(dead_code)]

pub mod fixtures;
pub mod gradsuite;
pub mod oracle;
