pub mod bank;
pub mod memory;
pub mod route;
pub mod train;

use moeforge::clustering::GroupAssignment;

use crate::error::{CliError, CliResult};
use crate::files::load_assignment;
use crate::GroupingArgs;

/// Grouping from `--assignment` or contiguous `--groups`.
pub(crate) fn resolve_grouping(args: &GroupingArgs, e: usize) -> CliResult<GroupAssignment> {
    let a = match (&args.assignment, args.groups) {
        (Some(path), _) => load_assignment(path)?,
        (None, Some(g)) => GroupAssignment::contiguous(e, g)?,
        (None, None) => return Err(CliError::usage("either --assignment or --groups is required")),
    };
    if a.num_experts() != e {
        return Err(CliError::usage(format!("grouping covers {} experts, expected {e}", a.num_experts())));
    }
    Ok(a)
}
