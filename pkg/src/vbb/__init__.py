"""Vision Big Bird at toy scale."""
