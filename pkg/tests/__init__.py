"""Test package for neurodecode."""
