"""Test package bootstrap for imports (factories, helpers)."""
