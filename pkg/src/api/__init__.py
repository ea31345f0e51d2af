"""API routes for LeakGuard."""
