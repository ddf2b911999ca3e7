"""Test-time inference, experiment protocols, reports and visualization."""
