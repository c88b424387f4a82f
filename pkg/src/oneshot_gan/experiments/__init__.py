"""Desk-scale experiment protocols, reports and plots."""
