"""Tests for the Yamaha (YNCA) integration."""
