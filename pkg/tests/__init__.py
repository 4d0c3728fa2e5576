"""Tests for unified auth server"""
